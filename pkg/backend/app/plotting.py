"""
SVG forest plot of simultaneous confidence intervals.

The output is a plain string assembled from fixed-precision coordinates,
so identical reports give byte-identical files.
"""

import json
import logging
import math
import os
from typing import Any, Dict, List, NamedTuple, Optional, Sequence

from app.errors import ReportError

logger = logging.getLogger(__name__)

ROW_HEIGHT = 18
CHAR_WIDTH = 6.2
PLOT_WIDTH = 420
MARGIN_TOP = 50
MARGIN_BOTTOM = 45
MARGIN_RIGHT = 30
TICKS = 5

INTERVAL_COLOR = "#2c3e50"
FLAGGED_COLOR = "#c0392b"


class ForestRow(NamedTuple):
    label: str
    estimate: float
    lower: Optional[float]
    upper: Optional[float]
    flagged: bool = False


def _escape_xml(text: str) -> str:
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def _num(x: float) -> str:
    text = f"{x:.2f}"
    return "0.00" if text == "-0.00" else text


def _finite(value: Any) -> Optional[float]:
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


def _axis_range(rows: Sequence[ForestRow], reference: float) -> tuple:
    values = [reference] + [r.estimate for r in rows]
    values += [v for r in rows for v in (r.lower, r.upper) if v is not None]
    lo, hi = min(values), max(values)
    if hi - lo <= 0.0:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def forest_plot_svg(
    rows: Sequence[ForestRow],
    title: str = "Simultaneous confidence intervals",
    reference: float = 0.0,
) -> str:
    """One horizontal interval per contrast with labels on the left and a
    vertical reference line; open interval sides run to the plot edge"""
    if not rows:
        raise ReportError("no contrasts to plot")

    label_width = int(min(max(len(r.label) for r in rows), 90) * CHAR_WIDTH) + 20
    width = label_width + PLOT_WIDTH + MARGIN_RIGHT
    height = MARGIN_TOP + ROW_HEIGHT * len(rows) + MARGIN_BOTTOM
    lo, hi = _axis_range(rows, reference)
    x0 = label_width
    bottom = MARGIN_TOP + ROW_HEIGHT * len(rows)

    def xpos(value: float) -> float:
        return x0 + (value - lo) / (hi - lo) * PLOT_WIDTH

    svg_parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="Arial,sans-serif">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{_num(width / 2)}" y="24" text-anchor="middle" font-size="14" font-weight="bold">{_escape_xml(title)}</text>',
    ]

    # axis with ticks
    svg_parts.append(
        f'<line class="axis" x1="{_num(x0)}" y1="{bottom}" x2="{_num(x0 + PLOT_WIDTH)}" y2="{bottom}" stroke="#7f8c8d"/>'
    )
    for i in range(TICKS + 1):
        value = lo + (hi - lo) * i / TICKS
        x = xpos(value)
        svg_parts.append(f'<line x1="{_num(x)}" y1="{bottom}" x2="{_num(x)}" y2="{bottom + 4}" stroke="#7f8c8d"/>')
        svg_parts.append(
            f'<text x="{_num(x)}" y="{bottom + 16}" text-anchor="middle" font-size="10">{_num(value)}</text>'
        )

    xr = xpos(reference)
    svg_parts.append(
        f'<line class="reference" x1="{_num(xr)}" y1="{MARGIN_TOP - 6}" x2="{_num(xr)}" y2="{bottom}" '
        f'stroke="#95a5a6" stroke-dasharray="4,3"/>'
    )

    for i, row in enumerate(rows):
        y = MARGIN_TOP + ROW_HEIGHT * i + ROW_HEIGHT / 2
        color = FLAGGED_COLOR if row.flagged else INTERVAL_COLOR
        left = xpos(row.lower) if row.lower is not None else x0
        right = xpos(row.upper) if row.upper is not None else x0 + PLOT_WIDTH
        svg_parts.append('<g class="contrast">')
        svg_parts.append(
            f'<text x="{label_width - 8}" y="{_num(y + 4)}" text-anchor="end" font-size="10">{_escape_xml(row.label)}</text>'
        )
        svg_parts.append(
            f'<line x1="{_num(left)}" y1="{_num(y)}" x2="{_num(right)}" y2="{_num(y)}" stroke="{color}" stroke-width="1.5"/>'
        )
        for end, is_open in ((left, row.lower is None), (right, row.upper is None)):
            if not is_open:
                svg_parts.append(
                    f'<line x1="{_num(end)}" y1="{_num(y - 4)}" x2="{_num(end)}" y2="{_num(y + 4)}" stroke="{color}"/>'
                )
        svg_parts.append(f'<circle cx="{_num(xpos(row.estimate))}" cy="{_num(y)}" r="3" fill="{color}"/>')
        svg_parts.append("</g>")

    svg_parts.append("</svg>")
    return "\n".join(svg_parts) + "\n"


def rows_from_report(report: Dict[str, Any], interval: str = "compatible") -> List[ForestRow]:
    """Forest rows from an analysis report dict; ``interval`` picks the
    compatible (1 - alpha) or the equivalence (1 - 2 alpha) intervals"""
    contrasts = report.get("contrasts") if isinstance(report, dict) else None
    if not isinstance(contrasts, list):
        raise ReportError("report has no 'contrasts' list")
    key = "equivalence_ci" if interval == "equivalence" else "ci"

    rows = []
    for i, entry in enumerate(contrasts, start=1):
        try:
            bounds = entry[key]
            if bounds is None or len(bounds) != 2:
                raise ReportError(f"contrast {i}: '{key}' must hold two bounds")
            rows.append(ForestRow(
                label=str(entry["label"]),
                estimate=float(entry["estimate"]),
                lower=_finite(bounds[0]),
                upper=_finite(bounds[1]),
                flagged=not bool(entry.get("equivalent", True)),
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise ReportError(f"contrast {i}: malformed record ({e})") from e
    return rows


def write_forest_plot(
    report: Dict[str, Any],
    out_path: str,
    interval: str = "compatible",
    title: Optional[str] = None,
) -> str:
    rows = rows_from_report(report, interval)
    if title is None:
        level = 1.0 - float(report.get("alpha", 0.05)) * (2.0 if interval == "equivalence" else 1.0)
        title = f"{len(rows)} contrasts: simultaneous {level:.0%} confidence intervals"
    svg = forest_plot_svg(rows, title=title)

    try:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        with open(out_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(svg)
    except OSError as e:
        raise ReportError(f"cannot write plot {out_path}: {e}") from e
    logger.info(f"Wrote forest plot with {len(rows)} rows to {out_path}")
    return svg


def load_report(path: str) -> Dict[str, Any]:
    if not os.path.isfile(path):
        raise ReportError(f"report file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ReportError(f"malformed report {path}: {e}") from e
