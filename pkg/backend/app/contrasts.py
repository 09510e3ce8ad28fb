"""
Contrast matrices for the dose factor, the laboratory factor and their
Kronecker-product interaction
"""

import logging
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from app.errors import ContrastError
from app.models import CellOrder, ContrastKind, ContrastMatrix, FactorLevels
from app.text_utils import (
    aligned_table,
    format_level,
    format_weight,
    interaction_label,
    lab_vs_rest_label,
    pooled_label,
)

logger = logging.getLogger(__name__)

ROW_SUM_TOLERANCE = 1e-12


def _require_dose(dose: FactorLevels) -> None:
    if not dose.is_dose:
        raise ContrastError(f"factor '{dose.name}' has no control designation; dose contrasts need one")


def williams_matrix(dose: FactorLevels) -> ContrastMatrix:
    """Williams-type contrasts: control against the pooled top-j dose groups, j = 1..k.

    Pooled groups are weighted by their replicate counts, so row j applied
    to the group means is the mean of all pooled observations minus the
    control mean.
    """
    _require_dose(dose)
    k = dose.n_levels - 1
    sizes = np.asarray(dose.sizes, dtype=float)

    rows = np.zeros((k, k + 1))
    labels: List[str] = []
    for j in range(1, k + 1):
        pooled = list(range(k + 1 - j, k + 1))
        rows[j - 1, 0] = -1.0
        rows[j - 1, pooled] = sizes[pooled] / sizes[pooled].sum()
        labels.append(pooled_label([dose.levels[i] for i in pooled], dose.levels[0]))

    return _checked(ContrastMatrix(
        kind=ContrastKind.WILLIAMS,
        rows=rows,
        row_labels=labels,
        column_labels=list(dose.levels),
    ))


def highest_dose_matrix(dose: FactorLevels) -> ContrastMatrix:
    _require_dose(dose)
    row = np.zeros((1, dose.n_levels))
    row[0, 0] = -1.0
    row[0, -1] = 1.0
    return _checked(ContrastMatrix(
        kind=ContrastKind.HIGHEST_DOSE,
        rows=row,
        row_labels=[pooled_label([dose.levels[-1]], dose.levels[0])],
        column_labels=list(dose.levels),
    ))


def dunnett_matrix(dose: FactorLevels) -> ContrastMatrix:
    """Every dose against the control"""
    _require_dose(dose)
    k = dose.n_levels - 1
    rows = np.zeros((k, k + 1))
    rows[:, 0] = -1.0
    rows[np.arange(k), np.arange(1, k + 1)] = 1.0
    return _checked(ContrastMatrix(
        kind=ContrastKind.DUNNETT,
        rows=rows,
        row_labels=[pooled_label([dose.levels[i]], dose.levels[0]) for i in range(1, k + 1)],
        column_labels=list(dose.levels),
    ))


def grand_mean_matrix(lab: FactorLevels) -> ContrastMatrix:
    """Each laboratory against the replicate-weighted mean of all other laboratories"""
    n_labs = lab.n_levels
    if n_labs < 2:
        raise ContrastError(f"factor '{lab.name}' has {n_labs} level; comparing against the rest needs at least 2")
    sizes = np.asarray(lab.sizes, dtype=float)

    rows = np.zeros((n_labs, n_labs))
    labels: List[str] = []
    for j in range(n_labs):
        others = [i for i in range(n_labs) if i != j]
        rows[j, others] = sizes[others] / sizes[others].sum()
        rows[j, j] = -1.0
        labels.append(lab_vs_rest_label(lab.levels[j], [lab.levels[i] for i in others]))

    return _checked(ContrastMatrix(
        kind=ContrastKind.GRAND_MEAN,
        rows=rows,
        row_labels=labels,
        column_labels=list(lab.levels),
    ))


def user_matrix(
    rows: Sequence[Sequence[float]],
    row_labels: Sequence[str],
    column_labels: Sequence[str],
) -> ContrastMatrix:
    try:
        matrix = ContrastMatrix(
            kind=ContrastKind.USER_DEFINED,
            rows=rows,
            row_labels=list(row_labels),
            column_labels=list(column_labels),
        )
    except ValueError as e:
        raise ContrastError(f"invalid user-defined contrast: {e}") from e
    return _checked(matrix)


def kronecker_interaction(
    c_lab: ContrastMatrix,
    c_dose: ContrastMatrix,
    order: CellOrder = CellOrder.LAB_MAJOR,
) -> ContrastMatrix:
    """Interaction contrasts C_lab (x) C_dose over the lab-by-dose cells.

    Row r * q_dose + s is the outer product of lab row r and dose row s.
    With lab-major cell order the column of cell (lab i, dose t) is
    i * m_dose + t; with dose-major order it is t * m_lab + i.
    """
    for name, parent in (("lab", c_lab), ("dose", c_dose)):
        problems = validate(parent)
        if problems:
            raise ContrastError(f"{name} contrast matrix is invalid: {'; '.join(problems)}")

    q_a, m_a = c_lab.rows.shape
    q_b, m_b = c_dose.rows.shape
    weights = np.kron(c_lab.rows, c_dose.rows)

    if order == CellOrder.LAB_MAJOR:
        columns = [f"{a}:{b}" for a in c_lab.column_labels for b in c_dose.column_labels]
    else:
        weights = weights.reshape(q_a * q_b, m_a, m_b).transpose(0, 2, 1).reshape(q_a * q_b, m_a * m_b)
        columns = [f"{a}:{b}" for b in c_dose.column_labels for a in c_lab.column_labels]

    labels = [interaction_label(la, lb) for la in c_lab.row_labels for lb in c_dose.row_labels]

    groups: Optional[List[str]] = None
    if c_lab.kind == ContrastKind.GRAND_MEAN:
        singled_out = [c_lab.column_labels[int(np.argmin(row))] for row in c_lab.rows]
        groups = [g for g in singled_out for _ in range(q_b)]

    result = ContrastMatrix(
        kind=ContrastKind.INTERACTION,
        rows=weights,
        row_labels=labels,
        column_labels=columns,
        cell_order=order,
        parent_shapes=((q_a, m_a), (q_b, m_b)),
        row_groups=groups,
    )
    logger.debug(f"Built {result.q} interaction contrasts over {result.m} cells ({order.value})")
    return _checked(result)


def validate(c: ContrastMatrix) -> List[str]:
    """All invariant violations of a contrast matrix; empty when it is valid"""
    violations: List[str] = []
    q, m = c.rows.shape

    if q < 1:
        violations.append("matrix: no rows")
    if m < 2:
        violations.append(f"matrix: {m} column(s), at least 2 required")

    for i, row in enumerate(c.rows, start=1):
        if not np.all(np.isfinite(row)):
            violations.append(f"row {i}: non-finite weight")
            continue
        if np.all(row == 0.0):
            violations.append(f"row {i}: all weights zero")
            continue
        total = float(row.sum())
        if abs(total) >= ROW_SUM_TOLERANCE:
            violations.append(f"row {i}: sum = {total:g} ≠ 0")

    if c.kind == ContrastKind.INTERACTION and c.parent_shapes is not None:
        (q_a, m_a), (q_b, m_b) = c.parent_shapes
        if q != q_a * q_b:
            violations.append(f"matrix: {q} rows, expected {q_a}·{q_b} = {q_a * q_b}")
        if m != m_a * m_b:
            violations.append(f"matrix: {m} columns, expected {m_a}·{m_b} = {m_a * m_b}")

    return violations


def _checked(c: ContrastMatrix) -> ContrastMatrix:
    problems = validate(c)
    if problems:
        raise ContrastError(f"{c.kind.value} contrast matrix is invalid: {'; '.join(problems)}")
    return c


def build_dose_contrast(dose: FactorLevels, kind: str) -> ContrastMatrix:
    builders = {
        "williams": williams_matrix,
        "highest": highest_dose_matrix,
        "dunnett": dunnett_matrix,
    }
    if kind not in builders:
        raise ContrastError(f"unknown dose contrast '{kind}'; choose from {', '.join(builders)}")
    return builders[kind](dose)


# Design helpers for inspecting matrices without data

def halving_series(k: int, top: float = 0.5) -> List[float]:
    """0 followed by k concentrations halving down from ``top``"""
    return [0.0] + [top / 2 ** (k - j) for j in range(1, k + 1)]


def make_dose_factor(
    k: int,
    sizes: Optional[Sequence[int]] = None,
    values: Optional[Sequence[float]] = None,
) -> FactorLevels:
    if k < 1:
        raise ContrastError(f"need at least one dose besides the control, got k={k}")
    values = list(values) if values is not None else halving_series(k)
    if len(values) != k + 1:
        raise ContrastError(f"{len(values)} dose levels given for k={k} (expected {k + 1})")
    labels = [format_level(v) for v in values]
    try:
        return FactorLevels(
            name="dose",
            levels=labels,
            sizes=list(sizes) if sizes is not None else [1] * (k + 1),
            control=labels[0],
            values=[float(v) for v in values],
        )
    except ValueError as e:
        raise ContrastError(str(e)) from e


def make_lab_factor(
    n_labs: int,
    sizes: Optional[Sequence[int]] = None,
    labels: Optional[Sequence[str]] = None,
) -> FactorLevels:
    if n_labs < 2:
        raise ContrastError(f"need at least 2 laboratories, got {n_labs}")
    try:
        return FactorLevels(
            name="lab",
            levels=list(labels) if labels is not None else [str(i) for i in range(1, n_labs + 1)],
            sizes=list(sizes) if sizes is not None else [1] * n_labs,
        )
    except ValueError as e:
        raise ContrastError(str(e)) from e


# Serialization

def to_json_dict(c: ContrastMatrix) -> Dict[str, Any]:
    return {
        "kind": c.kind.value,
        "row_labels": list(c.row_labels),
        "column_labels": list(c.column_labels),
        "rows": c.rows.tolist(),
    }


def from_json_dict(payload: Dict[str, Any]) -> ContrastMatrix:
    try:
        return ContrastMatrix(
            kind=ContrastKind(payload["kind"]),
            rows=payload["rows"],
            row_labels=payload["row_labels"],
            column_labels=payload["column_labels"],
        )
    except (KeyError, ValueError) as e:
        raise ContrastError(f"malformed contrast matrix payload: {e}") from e


def to_text(c: ContrastMatrix, title: Optional[str] = None) -> str:
    headers = ["contrast"] + list(c.column_labels)
    body = [[label] + [format_weight(w) for w in row] for label, row in zip(c.row_labels, c.rows)]
    table = aligned_table(headers, body)
    heading = title or f"{c.kind.value} contrasts ({c.q} x {c.m})"
    return f"{heading}\n{table}"
