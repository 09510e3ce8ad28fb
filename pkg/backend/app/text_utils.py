import re
import logging
from fractions import Fraction
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# ((lab - others):pooled doses) - ((lab - others):reference dose)
_INTERACTION_LABEL = re.compile(
    r"^\(\((?P<lab>[^()]+?) - (?P<others>[^()]*)\):(?P<top>[^()]*)\)"
    r" - \(\((?P=lab) - (?P=others)\):(?P<ref>[^()]*)\)$"
)
_GENERIC_INTERACTION_LABEL = re.compile(r"^\((?P<lab>[^()]+?) - (?P<others>[^()]*)\):\((?P<dose>.*)\)$")

P_DISPLAY_CEILING = 0.999


class InteractionLabel(NamedTuple):
    lab: str
    others: List[str]
    dose_part: str


def format_level(value: float) -> str:
    """Render a numeric level the way it is written in a design table: 0, 0.5, 0.015625"""
    text = np.format_float_positional(float(value), trim="-")
    return "0" if text in ("-0", "0.") else text


def pooled_label(pooled: Sequence[str], reference: str) -> str:
    return f"{','.join(pooled)} - {reference}"


def lab_vs_rest_label(lab: str, others: Sequence[str]) -> str:
    return f"{lab} - {','.join(others)}"


def interaction_label(lab_label: str, dose_label: str) -> str:
    """Combine a total-mean lab row label and a dose row label.

    Dose rows of the form "top - ref" produce the nested form
    "((lab - others):top) - ((lab - others):ref)"; any other dose label is
    wrapped as "(lab - others):(dose)".
    """
    parts = dose_label.split(" - ")
    if len(parts) == 2 and all(parts):
        top, ref = parts
        return f"(({lab_label}):{top}) - (({lab_label}):{ref})"
    return f"({lab_label}):({dose_label})"


def parse_interaction_label(label: str) -> Optional[InteractionLabel]:
    match = _INTERACTION_LABEL.match(label.strip())
    if match:
        return InteractionLabel(
            lab=match.group("lab").strip(),
            others=[o for o in match.group("others").split(",") if o],
            dose_part=f"{match.group('top')} - {match.group('ref')}",
        )
    match = _GENERIC_INTERACTION_LABEL.match(label.strip())
    if match:
        return InteractionLabel(
            lab=match.group("lab").strip(),
            others=[o for o in match.group("others").split(",") if o],
            dose_part=match.group("dose"),
        )
    return None


def format_p(p: float) -> str:
    """Four decimals, with values above 0.999 printed as 0.999"""
    if p > P_DISPLAY_CEILING:
        return f"{P_DISPLAY_CEILING:.3f}"
    return f"{p:.4f}"


def format_weight(w: float) -> str:
    """Exact rational rendering for contrast weights where one exists"""
    frac = Fraction(float(w)).limit_denominator(10_000)
    if abs(float(frac) - w) > 1e-12:
        return f"{w:.6g}"
    if frac.denominator == 1:
        return str(frac.numerator)
    return f"{frac.numerator}/{frac.denominator}"


def format_number(x: float, digits: int = 4) -> str:
    if x == float("inf"):
        return "Inf"
    if x == float("-inf"):
        return "-Inf"
    return f"{x:.{digits}f}"


def aligned_table(headers: Sequence[str], rows: Sequence[Sequence[str]], right_align_from: int = 1) -> str:
    """Plain-text table, first columns left aligned and the rest right aligned"""
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))

    def render(cells: Sequence[str]) -> str:
        out = []
        for i, cell in enumerate(cells):
            out.append(cell.rjust(widths[i]) if i >= right_align_from else cell.ljust(widths[i]))
        return "  ".join(out).rstrip()

    lines = [render(headers), "  ".join("-" * w for w in widths)]
    lines.extend(render(row) for row in rows)
    return "\n".join(lines)
