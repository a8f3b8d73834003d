"""
Run-directory writers: JSON reports, CSV tables, the F1 chart and the
evaluation workbook.

Every writer produces byte-identical output for identical inputs, so
deterministic runs can be compared file by file.
"""

import csv
import io
import json
import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import plotly.graph_objects as go
from pydantic import BaseModel

from models import ClassTaxonomy, EvalReport, RunReport

try:
    import xlsxwriter
    XLSX_AVAILABLE = True
except ImportError:
    XLSX_AVAILABLE = False

logger = logging.getLogger(__name__)

# Fixed document date for deterministic workbooks.
EPOCH_DATE = datetime(2000, 1, 1)

EVENT_COLUMNS = ["t", "ground_truth", "prediction", "sprayed"]


# ============================================================================
# JSON
# ============================================================================

def to_json(payload: Any) -> str:
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    return json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_json(path: Path, payload: Any) -> Path:
    """Write a model or plain dict as sorted, indented JSON (tmp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(to_json(payload))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    logger.debug(f"✅ Wrote {path}")
    return path


def read_json(path: Path) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# ============================================================================
# CSV
# ============================================================================

def write_confusion_csv(path: Path, confusion: Sequence[Sequence[int]], taxonomy: ClassTaxonomy) -> Path:
    """Rows are true classes, columns predicted classes, both labelled by short name."""
    names = [taxonomy.name(i) for i in range(len(taxonomy))]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["true\\pred"] + names)
        for name, row in zip(names, confusion):
            writer.writerow([name] + [int(v) for v in row])
    return Path(path)


def write_f1_csv(path: Path, report: EvalReport) -> Path:
    """Per-class precision/recall/F1 table, the data behind the F1 bar chart."""
    columns = ["class_id", "name", "precision", "recall", "f1", "support"]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for m in report.per_class:
            writer.writerow({
                "class_id": m.class_id, "name": m.name,
                "precision": f"{m.precision:.6f}", "recall": f"{m.recall:.6f}",
                "f1": f"{m.f1:.6f}", "support": m.support,
            })
    return Path(path)


def write_event_csv(path: Path, events: Iterable[Any], taxonomy: ClassTaxonomy) -> Path:
    """Field-run event log: one row per processed frame."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=EVENT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for e in events:
            writer.writerow({
                "t": f"{e.t:.3f}",
                "ground_truth": taxonomy.name(e.truth),
                "prediction": taxonomy.name(e.prediction),
                "sprayed": int(e.sprayed),
            })
    return Path(path)


def read_event_csv(path: Path, taxonomy: ClassTaxonomy) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return [
            {"t": float(r["t"]), "ground_truth": taxonomy.resolve(r["ground_truth"]),
             "prediction": taxonomy.resolve(r["prediction"]), "sprayed": r["sprayed"] == "1"}
            for r in csv.DictReader(f)
        ]


# ============================================================================
# PLOTLY
# ============================================================================

def f1_bar_chart(report: EvalReport) -> go.Figure:
    """Per-class F1 bars."""
    names = [m.name for m in report.per_class]
    f1 = [m.f1 for m in report.per_class]
    fig = go.Figure(data=[
        go.Bar(
            x=names,
            y=f1,
            marker_color='#4A90E2',
            hovertemplate='<b>%{x}</b><br>F1: %{y:.3f}<extra></extra>',
        )
    ])
    fig.update_layout(
        title=f"Per-class F1 ({report.role}, avg class accuracy {report.avg_class_accuracy:.2%})",
        xaxis_title="Class",
        yaxis_title="F1",
        yaxis_range=[0, 1],
        height=400,
        plot_bgcolor='white',
        paper_bgcolor='white',
        font=dict(family="Arial, sans-serif", size=12),
    )
    fig.update_yaxes(showgrid=True, gridwidth=1, gridcolor='#e5e7eb')
    return fig


def write_f1_html(path: Path, report: EvalReport) -> Path:
    f1_bar_chart(report).write_html(str(path), include_plotlyjs="cdn", full_html=True)
    logger.info(f"✅ F1 chart written to {path}")
    return Path(path)


# ============================================================================
# EXCEL
# ============================================================================

def eval_workbook(report: EvalReport, taxonomy: ClassTaxonomy,
                  run_report: Optional[RunReport] = None) -> Optional[bytes]:
    """
    Evaluation workbook: summary, per-class metrics and the confusion matrix
    on separate sheets (plus the field run when given).

    Returns:
        xlsx bytes, or None when xlsxwriter is not installed.
    """
    if not XLSX_AVAILABLE:
        logger.warning("⚠️ xlsxwriter not available - workbook export disabled")
        return None

    output = io.BytesIO()
    workbook = xlsxwriter.Workbook(output, {'in_memory': True})
    workbook.set_properties({'title': 'Weed classification evaluation', 'created': EPOCH_DATE})

    header_format = workbook.add_format({'bold': True, 'bg_color': '#4472C4', 'font_color': 'white'})
    title_format = workbook.add_format({'bold': True, 'font_size': 16, 'bg_color': '#1e293b', 'font_color': 'white'})
    number_format = workbook.add_format({'num_format': '0.0000'})
    percent_format = workbook.add_format({'num_format': '0.00%'})

    ws = workbook.add_worksheet('Summary')
    ws.merge_range('A1:C1', f'EVALUATION ({report.role.upper()})', title_format)
    ws.set_row(0, 30)
    ws.set_column(0, 0, 32)
    ws.set_column(1, 2, 16)
    summary = [
        ('Samples', report.n_samples, None),
        ('Average class accuracy', report.avg_class_accuracy, percent_format),
        ('Overall accuracy', report.overall_accuracy, percent_format),
        ('Parameters', report.parameter_count, None),
        ('Parameter bytes', report.parameter_bytes, None),
        ('Peak working set (bytes)', report.peak_working_set_bytes, None),
    ]
    if report.benchmark:
        summary += [
            ('Mean latency (ms)', report.benchmark.latency_ms.mean, number_format),
            ('p95 latency (ms)', report.benchmark.latency_ms.p95, number_format),
            ('Reference latency (ms)', report.benchmark.reference_latency_ms, number_format),
        ]
    ws.write(2, 0, 'Metric', header_format)
    ws.write(2, 1, 'Value', header_format)
    for row, (name, value, fmt) in enumerate(summary, start=3):
        ws.write(row, 0, name)
        ws.write(row, 1, value, fmt)

    ws_cls = workbook.add_worksheet('Per class')
    headers = ['Id', 'Class', 'Precision', 'Recall', 'F1', 'Support']
    for col, header in enumerate(headers):
        ws_cls.write(0, col, header, header_format)
    for row, m in enumerate(report.per_class, start=1):
        ws_cls.write_row(row, 0, [m.class_id, m.name])
        ws_cls.write(row, 2, m.precision, number_format)
        ws_cls.write(row, 3, m.recall, number_format)
        ws_cls.write(row, 4, m.f1, number_format)
        ws_cls.write(row, 5, m.support)

    ws_cm = workbook.add_worksheet('Confusion')
    names = [taxonomy.name(i) for i in range(len(taxonomy))]
    ws_cm.write(0, 0, 'true \\ pred', header_format)
    for col, name in enumerate(names, start=1):
        ws_cm.write(0, col, name, header_format)
    for row, (name, counts) in enumerate(zip(names, report.confusion), start=1):
        ws_cm.write(row, 0, name, header_format)
        ws_cm.write_row(row, 1, [int(c) for c in counts])
    if report.confusion:
        peak = int(np.max(report.confusion)) or 1
        ws_cm.conditional_format(1, 1, len(names), len(names), {
            'type': '2_color_scale', 'min_color': '#FFFFFF', 'max_color': '#4472C4',
            'min_type': 'num', 'min_value': 0, 'max_type': 'num', 'max_value': peak,
        })

    if run_report is not None:
        ws_run = workbook.add_worksheet('Field run')
        ws_run.write(0, 0, 'Metric', header_format)
        ws_run.write(0, 1, 'Value', header_format)
        ws_run.set_column(0, 0, 28)
        for row, (key, value) in enumerate(run_report.model_dump().items(), start=1):
            ws_run.write(row, 0, key)
            ws_run.write(row, 1, json.dumps(value, sort_keys=True) if isinstance(value, dict) else value)

    workbook.close()
    output.seek(0)
    return output.getvalue()


def write_eval_workbook(path: Path, report: EvalReport, taxonomy: ClassTaxonomy,
                        run_report: Optional[RunReport] = None) -> Optional[Path]:
    data = eval_workbook(report, taxonomy, run_report)
    if data is None:
        return None
    Path(path).write_bytes(data)
    logger.info(f"✅ Workbook written to {path}")
    return Path(path)
