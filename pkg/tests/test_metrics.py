import numpy as np
import pytest

from engine import prediction_from_probs
from errors import BenchmarkError
from metrics import (
    avg_class_accuracy,
    benchmark_inference,
    build_eval_report,
    confusion_matrix,
    latency_stats,
    overall_accuracy,
    per_class_metrics,
    precision_recall_f1,
)


def test_confusion_rows_are_truth():
    cm = confusion_matrix([1, 1, 2, 0], [1, 2, 2, 0], num_classes=3)
    assert cm.tolist() == [[1, 0, 0], [0, 1, 0], [0, 1, 1]]


def test_confusion_rejects_out_of_range_ids():
    with pytest.raises(ValueError):
        confusion_matrix([16], [0])
    with pytest.raises(ValueError):
        confusion_matrix([0], [-1])
    with pytest.raises(ValueError):
        confusion_matrix([0, 1], [0])


def test_zero_denominators_give_zero():
    cm = np.zeros((3, 3), dtype=np.int64)
    cm[0, 0] = 4
    cm[1, 0] = 2
    assert precision_recall_f1(cm, 2) == (0.0, 0.0, 0.0)
    # class 1 is never predicted and never right
    assert precision_recall_f1(cm, 1) == (0.0, 0.0, 0.0)
    p, r, f = precision_recall_f1(cm, 0)
    assert (p, r) == (pytest.approx(4 / 6), 1.0)
    assert f == pytest.approx(2 * p * r / (p + r))


def test_metrics_match_direct_recount():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 501))
        labels = rng.integers(0, 16, size=n)
        preds = np.where(rng.random(n) < 0.6, labels, rng.integers(0, 16, size=n))
        cm = confusion_matrix(preds, labels)
        for s in range(16):
            tp = int(np.sum((preds == s) & (labels == s)))
            fp = int(np.sum((preds == s) & (labels != s)))
            fn = int(np.sum((preds != s) & (labels == s)))
            p = tp / (tp + fp) if tp + fp else 0.0
            r = tp / (tp + fn) if tp + fn else 0.0
            f = 2 * p * r / (p + r) if p + r else 0.0
            assert precision_recall_f1(cm, s) == pytest.approx((p, r, f), abs=1e-12)


def test_average_class_accuracy_skips_empty_classes():
    cm = np.zeros((16, 16), dtype=np.int64)
    cm[0, 0], cm[0, 1] = 3, 1
    cm[5, 5] = 2
    assert avg_class_accuracy(cm) == pytest.approx((0.75 + 1.0) / 2)
    assert overall_accuracy(cm) == pytest.approx(5 / 6)
    assert avg_class_accuracy(np.zeros((16, 16), dtype=np.int64)) == 0.0


def test_eval_report(taxonomy):
    labels = list(range(16)) * 2
    preds = list(range(16)) + [0] * 16
    report = build_eval_report(preds, labels, taxonomy, parameter_count=1000, peak_working_set_bytes=8192)
    assert report.n_samples == 32
    assert report.overall_accuracy == pytest.approx(17 / 32)
    assert report.parameter_bytes == 4000
    assert report.per_class[8].name == "Neg."
    assert report.per_class[0].support == 2
    assert report.reference["field"]["inference_ms"] == 47.78
    assert len(per_class_metrics(np.array(report.confusion), taxonomy)) == 16


def test_latency_stats_order():
    stats = latency_stats([1.0, 2.0, 3.0, 4.0, 100.0])
    assert stats.p50 == 3.0
    assert stats.p50 <= stats.p95 <= stats.max == 100.0
    assert stats.mean == pytest.approx(22.0)


class FakeRunner:
    name = "fake"

    def __init__(self, graph, taxonomy):
        self.graph = graph
        self.taxonomy = taxonomy
        self.calls = 0

    def predict(self, frame):
        self.calls += 1
        return prediction_from_probs(np.full(16, 0.5), self.taxonomy)

    def parameter_count(self):
        return 10

    def working_set_bytes(self, batch_size=1):
        return 1234


def _stepping_clock(step_s):
    now = [0.0]

    def clock():
        now[0] += step_s
        return now[0]

    return clock


def test_benchmark_discards_warmup(tiny_graph, taxonomy):
    runner = FakeRunner(tiny_graph, taxonomy)
    frames = [np.zeros((4, 4, 3), dtype=np.uint8)]
    report = benchmark_inference(runner, frames, warmup_n=5, timed_n=20, clock=_stepping_clock(0.004))
    assert runner.calls == 25
    assert report.timed_frames == 20
    assert report.latency_ms.mean == pytest.approx(4.0)
    assert report.parameter_bytes == 40
    assert report.peak_working_set_bytes == 1234
    assert report.flops == sum(report.flops_by_kind.values()) > 0
    assert report.reference_latency_ms == 47.78


def test_benchmark_preconditions(tiny_graph, taxonomy):
    runner = FakeRunner(tiny_graph, taxonomy)
    frames = [np.zeros((4, 4, 3), dtype=np.uint8)]
    with pytest.raises(BenchmarkError):
        benchmark_inference(runner, frames, warmup_n=0)
    with pytest.raises(BenchmarkError):
        benchmark_inference(runner, frames, timed_n=9)
    with pytest.raises(BenchmarkError):
        benchmark_inference(runner, [])
