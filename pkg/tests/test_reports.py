import csv
import json
import threading

import pytest

from log_manager import RunLog, read_run_log
from metrics import build_eval_report
from pdf_exporter import generate_eval_pdf
from reports import (
    eval_workbook,
    f1_bar_chart,
    read_json,
    to_json,
    write_confusion_csv,
    write_f1_csv,
    write_json,
)


@pytest.fixture
def report(taxonomy):
    labels = [i % 16 for i in range(32)]
    predictions = [l if l % 2 == 0 else (l + 1) % 16 for l in labels]
    return build_eval_report(predictions, labels, taxonomy, 1000, 4096, "test", None)


# ============================================================================
# JSON / CSV
# ============================================================================

def test_json_is_sorted_and_stable(tmp_path, report):
    assert to_json({"b": 1, "a": 2}) == '{\n  "a": 2,\n  "b": 1\n}\n'
    path = write_json(tmp_path / "eval.json", report)
    first = path.read_bytes()
    write_json(path, report)
    assert path.read_bytes() == first
    assert read_json(path)["n_samples"] == 32
    assert not (tmp_path / "eval.json.tmp").exists()


def test_confusion_csv_layout(tmp_path, report, taxonomy):
    path = write_confusion_csv(tmp_path / "confusion.csv", report.confusion, taxonomy)
    rows = list(csv.reader(path.open(encoding="utf-8")))
    assert rows[0][0] == "true\\pred"
    assert rows[0][1:] == [taxonomy.name(i) for i in range(16)]
    assert len(rows) == 17
    assert sum(int(v) for row in rows[1:] for v in row[1:]) == 32


def test_f1_csv_columns(tmp_path, report):
    path = write_f1_csv(tmp_path / "f1.csv", report)
    rows = list(csv.DictReader(path.open(encoding="utf-8")))
    assert list(rows[0]) == ["class_id", "name", "precision", "recall", "f1", "support"]
    assert len(rows) == 16
    assert float(rows[0]["recall"]) == 1.0


def test_f1_chart_has_one_bar_per_class(report):
    fig = f1_bar_chart(report)
    assert len(fig.data[0].x) == 16


# ============================================================================
# DOCUMENTS
# ============================================================================

def test_workbook_is_reproducible(report, taxonomy):
    data = eval_workbook(report, taxonomy)
    assert data[:2] == b"PK"
    assert eval_workbook(report, taxonomy) == data


def test_pdf_is_generated(report):
    data = generate_eval_pdf(report)
    assert data[:4] == b"%PDF"


# ============================================================================
# RUN LOG
# ============================================================================

def test_run_log_sequence_and_timestamps(tmp_path):
    log = RunLog(tmp_path / "run_log.jsonl")
    assert log.write_config("split", {"seed": 1})
    assert log.write_outcome("split", "ok", counts={"train": 3})
    records = read_run_log(tmp_path / "run_log.jsonl")
    assert [r["seq"] for r in records] == [0, 1]
    assert all("timestamp" in r for r in records)
    assert records[1]["counts"] == {"train": 3}


def test_deterministic_run_log_has_no_timestamp(tmp_path):
    log = RunLog(tmp_path / "run_log.jsonl", deterministic=True)
    log.write_config("train", {"seed": 0})
    line = (tmp_path / "run_log.jsonl").read_text(encoding="utf-8")
    assert json.loads(line) == {"command": "train", "config": {"seed": 0}, "event": "config", "seq": 0}


def test_concurrent_appends_keep_lines_whole(tmp_path):
    log = RunLog(tmp_path / "run_log.jsonl", deterministic=True)
    threads = [threading.Thread(target=lambda: [log.write("epoch", "train", n=i) for i in range(20)])
               for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    records = read_run_log(tmp_path / "run_log.jsonl")
    assert len(records) == 80
    assert sorted(r["seq"] for r in records) == list(range(80))


def test_missing_run_log_reads_empty(tmp_path):
    assert read_run_log(tmp_path / "absent.jsonl") == []
