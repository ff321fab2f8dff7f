"""
PDF报告生成器 - 重建与保真度报告
PDF Report Generator - reconstruction and fidelity tables
"""
import io
import logging
from datetime import datetime, timezone
from typing import List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
from reportlab.lib import colors  # noqa: E402
from reportlab.lib.enums import TA_CENTER  # noqa: E402
from reportlab.lib.pagesizes import A4  # noqa: E402
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet  # noqa: E402
from reportlab.lib.units import cm, inch  # noqa: E402
from reportlab.platypus import Image, Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle  # noqa: E402

from .fidelity import FidelityReport, ReconstructionReport  # noqa: E402

logger = logging.getLogger(__name__)

ACCENT = "#667eea"
ACCENT_DARK = "#764ba2"


class ReplayReportPDFGenerator:
    """重建报告PDF生成器"""

    def __init__(self):
        self.width, self.height = A4
        self.styles = getSampleStyleSheet()
        self._setup_custom_styles()

    def _setup_custom_styles(self):
        # 标题样式
        self.title_style = ParagraphStyle(
            'ReportTitle',
            parent=self.styles['Heading1'],
            fontSize=20,
            textColor=colors.HexColor(ACCENT),
            spaceAfter=20,
            alignment=TA_CENTER,
            fontName='Helvetica-Bold',
            leading=26
        )
        # 副标题样式
        self.subtitle_style = ParagraphStyle(
            'ReportSubtitle',
            parent=self.styles['Heading2'],
            fontSize=14,
            textColor=colors.HexColor(ACCENT_DARK),
            spaceAfter=10,
            spaceBefore=14,
            fontName='Helvetica-Bold',
            leading=18
        )
        self.body_style = ParagraphStyle(
            'ReportBody',
            parent=self.styles['BodyText'],
            fontSize=9,
            leading=13,
            textColor=colors.grey,
        )

    def generate_report(self, output_path: str, reconstruction: Optional[ReconstructionReport] = None,
                        fidelity: Optional[FidelityReport] = None, title: str = "CI Build Replay Report") -> str:
        doc = SimpleDocTemplate(
            str(output_path),
            pagesize=A4,
            rightMargin=2*cm,
            leftMargin=2*cm,
            topMargin=2*cm,
            bottomMargin=2*cm
        )
        story = [Paragraph(title, self.title_style)]
        generated = datetime.now(timezone.utc).strftime("%Y-%m-%d %H:%M UTC")
        story.append(Paragraph(f"Generated {generated}", self.body_style))
        story.append(Spacer(1, 0.3*inch))

        if reconstruction is not None:
            story.append(Paragraph("Reconstruction success per project", self.subtitle_style))
            story.append(self._table(reconstruction.to_frame()))
            if reconstruction.cause_histogram:
                story.append(Paragraph(f"Primary causes of reconstruction failure (n={reconstruction.failures})",
                                       self.subtitle_style))
                story.append(self._table(reconstruction.causes_frame()))
                story.append(Spacer(1, 0.2*inch))
                story.append(self._cause_chart(reconstruction))

        if fidelity is not None:
            story.append(Paragraph("Reconstruction fidelity per project", self.subtitle_style))
            story.append(self._table(fidelity.to_frame()))

        doc.build(story)
        logger.info(f"[REPORT] wrote {output_path}")
        return str(output_path)

    def _table(self, frame: pd.DataFrame) -> Table:
        data: List[List[str]] = [list(frame.columns)] + [[str(v) for v in row] for row in frame.itertuples(index=False)]
        table = Table(data, hAlign='LEFT')
        table.setStyle(TableStyle([
            ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
            ('FONTNAME', (0, 1), (-1, -1), 'Helvetica'),
            ('FONTSIZE', (0, 0), (-1, -1), 9),
            ('TEXTCOLOR', (0, 0), (-1, 0), colors.white),
            ('BACKGROUND', (0, 0), (-1, 0), colors.HexColor(ACCENT)),
            ('BACKGROUND', (0, -1), (-1, -1), colors.HexColor('#f0f2f6')),
            ('GRID', (0, 0), (-1, -1), 0.5, colors.grey),
            ('VALIGN', (0, 0), (-1, -1), 'MIDDLE'),
            ('LEFTPADDING', (0, 0), (-1, -1), 8),
            ('RIGHTPADDING', (0, 0), (-1, -1), 8),
        ]))
        return table

    def _cause_chart(self, report: ReconstructionReport) -> Image:
        """失败原因柱状图"""
        labels = [k.value.replace("_", " ") for k in report.cause_histogram]
        counts = list(report.cause_histogram.values())
        fig, ax = plt.subplots(figsize=(6.5, 2.8))
        try:
            ax.barh(labels[::-1], counts[::-1], color=ACCENT)
            ax.set_xlabel("failed reconstructions")
            for y, c in enumerate(counts[::-1]):
                ax.text(c, y, f" {c}", va="center", fontsize=8)
            fig.tight_layout()
            buf = io.BytesIO()
            fig.savefig(buf, format="png", dpi=150)
        finally:
            plt.close(fig)
        buf.seek(0)
        return Image(buf, width=6.5*inch, height=2.8*inch)


def generate_report_pdf(output_path: str, reconstruction: Optional[ReconstructionReport] = None,
                        fidelity: Optional[FidelityReport] = None) -> str:
    """便捷函数：生成报告PDF"""
    return ReplayReportPDFGenerator().generate_report(output_path, reconstruction, fidelity)
