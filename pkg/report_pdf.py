"""
PDF summary of an encrypted synthesis run.
"""

import logging
from io import BytesIO
from typing import Optional

from reportlab.lib import colors
from reportlab.lib.enums import TA_CENTER, TA_LEFT
from reportlab.lib.pagesizes import letter
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import inch
from reportlab.platypus import Paragraph, Preformatted, SimpleDocTemplate, Spacer, Table, TableStyle

from errors import HerlError
from mdp_core import GridWorldSpec, build_grid_world, render_grid

logger = logging.getLogger(__name__)

PRIMARY_COLOR = colors.HexColor('#2563eb')
TRAJECTORY_ROWS = 12


def _table(rows, header_color=PRIMARY_COLOR) -> Table:
    table = Table(rows, hAlign='LEFT')
    table.setStyle(TableStyle([
        ('BACKGROUND', (0, 0), (-1, 0), header_color),
        ('TEXTCOLOR', (0, 0), (-1, 0), colors.white),
        ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
        ('FONTSIZE', (0, 0), (-1, -1), 9),
        ('GRID', (0, 0), (-1, -1), 0.25, colors.HexColor('#999999')),
        ('ROWBACKGROUNDS', (0, 1), (-1, -1), [colors.white, colors.HexColor('#f1f5f9')]),
    ]))
    return table


def _sampled_steps(length: int, rows: int = TRAJECTORY_ROWS):
    if length <= rows:
        return list(range(length))
    stride = (length - 1) / (rows - 1)
    return sorted({int(round(i * stride)) for i in range(rows)})


def build_report_pdf(result, path: Optional[str] = None) -> BytesIO:
    """
    Render a RunResult as a one-page PDF.

    Args:
        result: experiment.RunResult
        path: optional file to write besides the returned buffer

    Returns:
        BytesIO buffer containing the PDF
    """
    buffer = BytesIO()
    doc = SimpleDocTemplate(
        buffer,
        pagesize=letter,
        leftMargin=0.75 * inch,
        rightMargin=0.75 * inch,
        topMargin=0.75 * inch,
        bottomMargin=0.75 * inch,
    )
    styles = getSampleStyleSheet()
    title_style = ParagraphStyle('ReportTitle', parent=styles['Title'], fontSize=20,
                                 textColor=PRIMARY_COLOR, alignment=TA_CENTER, spaceAfter=12)
    heading_style = ParagraphStyle('ReportHeading', parent=styles['Heading2'], fontSize=13,
                                   textColor=PRIMARY_COLOR, spaceBefore=12, spaceAfter=6)
    body_style = ParagraphStyle('ReportBody', parent=styles['Normal'], fontSize=10,
                                textColor=colors.HexColor('#333333'), alignment=TA_LEFT, leading=14)
    warning_style = ParagraphStyle('ReportWarning', parent=body_style, textColor=colors.HexColor('#b91c1c'),
                                   fontName='Helvetica-Oblique')

    summary = result.summary()
    config = result.config
    story = [
        Paragraph('Encrypted Policy Synthesis Report', title_style),
        Paragraph('Demonstration parameters only: the ring is tiny and bootstrapping is a '
                  'recryption oracle holding the secret key. Nothing here is confidential.', warning_style),
        Paragraph('Configuration', heading_style),
        _table([
            ['S', 'N', 'scale', 'backend', 'mode', 'T', 'lambda'],
            [summary['S'], summary['N'], f"2^{summary['scale_log2']}", summary['backend'], summary['mode'],
             summary['iters'], config['lam']],
        ]),
        Paragraph('Timing per iteration and final error', heading_style),
        _table([
            ['mean (s)', 'min (s)', 'max (s)', 'bootstrap share', 'Err(T)'],
            [f"{summary['mean_s']:.3f}", f"{summary['min_s']:.3f}", f"{summary['max_s']:.3f}",
             f"{100 * summary['boot_share']:.0f}%", f"{summary['err_T']:.3e}"],
        ]),
    ]

    if result.report is not None:
        report = result.report
        story.append(Paragraph('Error trajectory against the convergence bound', heading_style))
        rows = [['k', 'Err(k)', 'sup error', 'bound']]
        for k in _sampled_steps(len(report.err_trajectory)):
            rows.append([k, f'{report.err_trajectory[k]:.3e}', f'{report.inf_errors[k]:.3e}',
                         f'{report.bound_curve[k]:.3e}'])
        story.append(_table(rows))
        story.append(Spacer(1, 6))
        story.append(Paragraph(
            f'beta = {report.params.beta:.3e}, alpha = {report.params.alpha:.4f}, '
            f'limsup bound = {report.limsup:.3e}, violations = {report.violations}', body_style))

    spec = GridWorldSpec(config['width'], config['height'], tuple(config['goal']),
                         frozenset(tuple(c) for c in config['obstacles']), config['stage_cost'])
    try:
        mdp = build_grid_world(spec)
    except HerlError as e:
        logger.warning("[Report] cannot redraw grid: %s", e)
        mdp = None
    if mdp is not None:
        story.append(Paragraph('Greedy decrypted policy', heading_style))
        story.append(Preformatted(render_grid(mdp, spec, result.greedy), styles['Code']))
        story.append(Paragraph(
            'matches the plaintext policy' if result.policy_matches else 'DIFFERS from the plaintext policy',
            body_style))

    doc.build(story)
    buffer.seek(0)
    if path:
        with open(path, 'wb') as handle:
            handle.write(buffer.getvalue())
        buffer.seek(0)
    return buffer
