"""
PDF exporter for evaluation runs.
One-page summary: headline accuracies, per-class table, benchmark and field run.
"""

import logging
from datetime import datetime
from pathlib import Path
from typing import Optional

from models import EvalReport, RunReport

try:
    from fpdf import FPDF
    FPDF_AVAILABLE = True
except ImportError:
    FPDF_AVAILABLE = False
    FPDF = object

logger = logging.getLogger(__name__)

FIXED_DATE = datetime(2000, 1, 1)


class EvalPDF(FPDF):
    """Evaluation report layout."""

    def __init__(self, title: str = "Weed Classification - Evaluation Report"):
        super().__init__()
        self.report_title = title

    def header(self):
        self.set_font('Helvetica', 'B', 16)
        self.set_text_color(22, 101, 52)
        self.cell(0, 10, self.report_title, 0, 0, 'C')
        self.ln(16)

    def footer(self):
        self.set_y(-15)
        self.set_font('Helvetica', 'I', 8)
        self.set_text_color(128, 128, 128)
        self.cell(0, 10, f'Page {self.page_no()}', 0, 0, 'C')

    def chapter_title(self, title: str):
        self.set_font('Helvetica', 'B', 13)
        self.set_text_color(15, 23, 42)
        self.cell(0, 9, title, 0, 1, 'L')
        self.ln(1)

    def add_field(self, label: str, value: str):
        self.set_font('Helvetica', 'B', 10)
        self.set_text_color(71, 85, 105)
        self.cell(70, 7, f"{label}:", 0, 0, 'L')
        self.set_font('Helvetica', '', 10)
        self.set_text_color(15, 23, 42)
        self.cell(0, 7, value, 0, 1, 'L')

    def add_accuracy_box(self, accuracy: float):
        """Coloured headline box: green >= 0.90, amber >= 0.75, red below."""
        if accuracy >= 0.90:
            color = (34, 197, 94)
        elif accuracy >= 0.75:
            color = (251, 146, 60)
        else:
            color = (239, 68, 68)
        self.set_fill_color(*color)
        self.set_draw_color(200, 200, 200)
        self.rect(10, self.get_y(), 190, 14, 'DF')
        self.set_font('Helvetica', 'B', 12)
        self.set_text_color(255, 255, 255)
        self.cell(0, 14, f"AVERAGE CLASS ACCURACY: {accuracy:.2%}", 0, 1, 'C')
        self.ln(4)

    def add_table(self, headers, rows, widths):
        self.set_font('Helvetica', 'B', 9)
        self.set_fill_color(68, 114, 196)
        self.set_text_color(255, 255, 255)
        for h, w in zip(headers, widths):
            self.cell(w, 6, h, 1, 0, 'C', True)
        self.ln()
        self.set_font('Helvetica', '', 9)
        self.set_text_color(15, 23, 42)
        for row in rows:
            for v, w in zip(row, widths):
                self.cell(w, 5, v, 1, 0, 'C')
            self.ln()
        self.ln(3)


def generate_eval_pdf(
    report: EvalReport,
    run_report: Optional[RunReport] = None,
    generated_at: Optional[datetime] = None,
) -> Optional[bytes]:
    """
    Render the evaluation summary.

    Args:
        generated_at: stamped on the page and in the document metadata;
            None uses a fixed date so output is reproducible

    Returns:
        bytes: PDF content, or None if fpdf2 is missing or rendering failed
    """
    if not FPDF_AVAILABLE:
        logger.error("❌ fpdf2 not available - cannot generate PDF")
        return None

    stamp = generated_at or FIXED_DATE
    try:
        pdf = EvalPDF()
        pdf.set_creation_date(stamp)
        pdf.add_page()

        pdf.set_font('Helvetica', '', 9)
        pdf.set_text_color(100, 116, 139)
        pdf.cell(0, 5, f"Generated: {stamp.strftime('%Y-%m-%d %H:%M')}", 0, 1, 'R')
        pdf.cell(0, 5, f"Split: {report.role} ({report.n_samples} samples)", 0, 1, 'R')
        pdf.ln(4)

        pdf.add_accuracy_box(report.avg_class_accuracy)

        pdf.chapter_title("1. Model")
        pdf.add_field("Overall accuracy", f"{report.overall_accuracy:.2%}")
        pdf.add_field("Parameters", f"{report.parameter_count:,} ({report.parameter_bytes / 1024:.1f} KiB)")
        pdf.add_field("Peak working set", f"{report.peak_working_set_bytes / 1024 ** 2:.2f} MiB")
        if report.benchmark:
            b = report.benchmark
            pdf.add_field("Latency mean / p95",
                          f"{b.latency_ms.mean:.2f} / {b.latency_ms.p95:.2f} ms "
                          f"(reference {b.reference_latency_ms:.2f} ms)")
        pdf.ln(2)

        pdf.chapter_title("2. Per-class metrics")
        rows = [[m.name, f"{m.precision:.3f}", f"{m.recall:.3f}", f"{m.f1:.3f}", str(m.support)]
                for m in report.per_class]
        pdf.add_table(["Class", "Precision", "Recall", "F1", "Support"], rows, [40, 35, 35, 35, 30])

        if run_report is not None:
            pdf.chapter_title("3. Field run")
            pdf.add_field("Patch accuracy", f"{run_report.patch_accuracy:.2%}")
            pdf.add_field("Weeds sprayed / total", f"{run_report.weeds_sprayed} / {run_report.weeds_total}")
            pdf.add_field("False sprays", str(run_report.false_sprays))
            pdf.add_field("Herbicide used", f"{run_report.herbicide_ml:.2f} ml")
            pdf.add_field("Baseline", f"{run_report.baseline_ml:.2f} ml "
                                      f"(saved {run_report.savings_pct:.1f}%)")

        return bytes(pdf.output())
    except Exception as e:
        logger.error(f"❌ PDF generation failed: {e}")
        return None


def write_eval_pdf(path: Path, report: EvalReport, run_report: Optional[RunReport] = None,
                   generated_at: Optional[datetime] = None) -> Optional[Path]:
    data = generate_eval_pdf(report, run_report, generated_at)
    if data is None:
        return None
    Path(path).write_bytes(data)
    logger.info(f"✅ PDF written to {path}")
    return Path(path)
