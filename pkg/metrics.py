"""
Classification metrics and inference benchmarking.

Confusion matrices are 16x16 int64 arrays, rows = true class, columns =
predicted class. Empty denominators give 0 (precision with nothing predicted,
recall with nothing true, F1 when precision + recall = 0).
"""

import logging
import time
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from errors import BenchmarkError
from models import (
    NUM_CLASSES,
    BenchmarkReport,
    ClassMetrics,
    ClassPrediction,
    ClassTaxonomy,
    EvalReport,
    LatencyStats,
    ModelGraph,
)
from network import flops_by_kind

logger = logging.getLogger(__name__)

# Reference models trained on the same dataset, echoed next to measured values.
REFERENCE_MODELS: Dict[str, Dict[str, Any]] = {
    "DenseNet121": {"epoch_time_s": 978, "accuracy": 0.9677, "loss": 0.0027},
    "InceptionV3": {"epoch_time_s": 437},
    "MobileNetV2": {"epoch_time_s": 274, "accuracy": 0.9450, "accuracy_at_64_epochs": 0.9450,
                    "accuracy_at_128_epochs": 0.9615},
    "ResNet50": {"epoch_time_s": 672},
    "Xception": {"epoch_time_s": 672},
}
REFERENCE_FIELD = {"inference_ms": 47.78, "field_accuracy": 0.90}


def reference_block() -> Dict[str, Any]:
    return {"models": REFERENCE_MODELS, "field": REFERENCE_FIELD}


# ============================================================================
# CONFUSION / PER-CLASS METRICS
# ============================================================================

def confusion_matrix(predictions: Sequence[int], labels: Sequence[int], num_classes: int = NUM_CLASSES) -> np.ndarray:
    preds = np.asarray(predictions, dtype=np.int64).ravel()
    truth = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != truth.shape:
        raise ValueError(f"{preds.size} predictions but {truth.size} labels")
    for name, arr in (("prediction", preds), ("label", truth)):
        bad = arr[(arr < 0) | (arr >= num_classes)]
        if bad.size:
            raise ValueError(f"{name} id {int(bad[0])} outside 0..{num_classes - 1}")
    counts = np.bincount(truth * num_classes + preds, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes).astype(np.int64)


def precision_recall_f1(cm: np.ndarray, s: int) -> Tuple[float, float, float]:
    tp = float(cm[s, s])
    predicted = float(cm[:, s].sum())
    actual = float(cm[s, :].sum())
    precision = tp / predicted if predicted else 0.0
    recall = tp / actual if actual else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if (precision + recall) else 0.0
    return precision, recall, f1


def avg_class_accuracy(cm: np.ndarray) -> float:
    """Macro recall over classes that have at least one true sample."""
    rows = cm.sum(axis=1)
    present = np.flatnonzero(rows > 0)
    if len(present) < cm.shape[0]:
        empty = sorted(set(range(cm.shape[0])) - set(present.tolist()))
        logger.warning(f"⚠️ Classes {empty} have no true samples; excluded from average class accuracy")
    if not len(present):
        return 0.0
    recalls = np.diag(cm)[present] / rows[present]
    return float(recalls.mean())


def overall_accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    return float(np.trace(cm) / total) if total else 0.0


def per_class_metrics(cm: np.ndarray, taxonomy: ClassTaxonomy) -> List[ClassMetrics]:
    out = []
    for s in range(cm.shape[0]):
        p, r, f = precision_recall_f1(cm, s)
        out.append(ClassMetrics(class_id=s, name=taxonomy.name(s), precision=p, recall=r, f1=f,
                                support=int(cm[s].sum())))
    return out


def build_eval_report(
    predictions: Sequence[int],
    labels: Sequence[int],
    taxonomy: ClassTaxonomy,
    parameter_count: int,
    peak_working_set_bytes: int,
    role: str = "test",
    benchmark: Optional[BenchmarkReport] = None,
) -> EvalReport:
    cm = confusion_matrix(predictions, labels, len(taxonomy))
    return EvalReport(
        role=role,
        n_samples=int(cm.sum()),
        per_class=per_class_metrics(cm, taxonomy),
        avg_class_accuracy=avg_class_accuracy(cm),
        overall_accuracy=overall_accuracy(cm),
        confusion=cm.tolist(),
        parameter_count=parameter_count,
        parameter_bytes=4 * parameter_count,
        peak_working_set_bytes=peak_working_set_bytes,
        benchmark=benchmark,
        reference=reference_block(),
    )


# ============================================================================
# BENCHMARK
# ============================================================================

class Runner(Protocol):
    name: str
    graph: ModelGraph

    def predict(self, frame: np.ndarray) -> ClassPrediction: ...

    def parameter_count(self) -> int: ...

    def working_set_bytes(self, batch_size: int = 1) -> int: ...


def latency_stats(samples_ms: Sequence[float]) -> LatencyStats:
    arr = np.asarray(samples_ms, dtype=np.float64)
    return LatencyStats(
        mean=float(arr.mean()),
        p50=float(np.percentile(arr, 50)),
        p95=float(np.percentile(arr, 95)),
        max=float(arr.max()),
    )


def benchmark_inference(
    runner: Runner,
    frames: Sequence[np.ndarray],
    warmup_n: int = 5,
    timed_n: int = 100,
    clock: Callable[[], float] = time.perf_counter,
) -> BenchmarkReport:
    """
    Time single-frame inference, cycling through `frames`.

    Runs in the calling thread only. Warmup iterations are discarded.
    """
    if warmup_n < 1:
        raise BenchmarkError("at least one warmup iteration is required")
    if timed_n < 10:
        raise BenchmarkError(f"{timed_n} timed frames is too few to report percentiles (need >= 10)")
    if not frames:
        raise BenchmarkError("no frames to benchmark")

    for i in range(warmup_n):
        runner.predict(frames[i % len(frames)])
    samples = []
    for i in range(timed_n):
        frame = frames[i % len(frames)]
        start = clock()
        runner.predict(frame)
        samples.append((clock() - start) * 1000.0)

    by_kind = flops_by_kind(runner.graph, 1)
    stats = latency_stats(samples)
    logger.info(f"✅ {runner.name}: mean {stats.mean:.2f} ms, p95 {stats.p95:.2f} ms over {timed_n} frames")
    count = runner.parameter_count()
    return BenchmarkReport(
        runner=runner.name,
        timed_frames=timed_n,
        warmup_frames=warmup_n,
        latency_ms=stats,
        parameter_count=count,
        parameter_bytes=4 * count,
        peak_working_set_bytes=runner.working_set_bytes(1),
        flops=int(sum(by_kind.values())),
        flops_by_kind=by_kind,
        reference_latency_ms=REFERENCE_FIELD["inference_ms"],
    )
