"""
Max-t multiple contrast test, compatible simultaneous confidence intervals
and the equivalence reading of the adjusted p-values
"""

import logging
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import stats

from app.cell_means import CovarianceEstimate, FittedCellMeansModel
from app.errors import ContrastError, DegenerateDataError
from app.models import Alternative, ContrastKind, ContrastMatrix, CovarianceKind
from app.mvt import (
    CorrelationMatrix,
    MvtEstimate,
    QmcConfig,
    Tail,
    contrast_covariance,
    correlation_from_contrasts,
    equicoordinate_quantile,
    mvt_rectangle_probability,
)
from app.text_utils import parse_interaction_label

logger = logging.getLogger(__name__)

# probability tolerance of the quantile search
QUANTILE_PROBABILITY_TOLERANCE = 1e-3

_TAILS = {
    Alternative.TWO_SIDED: Tail.TWO_SIDED_BOX,
    Alternative.GREATER: Tail.UPPER_ONE_SIDED,
    Alternative.LESS: Tail.LOWER_ONE_SIDED,
}


class ContrastRecord(BaseModel):
    label: str
    estimate: float
    se: float
    t: float
    p_raw: float
    p_adjusted: float
    ci_lower: float
    ci_upper: float
    borderline: bool = False


class MaxTResult(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    records: List[ContrastRecord]
    alternative: Alternative
    alpha: float
    df: int
    correlation: CorrelationMatrix
    critical_value: float
    estimator: CovarianceKind
    mvt_error: float
    contrast_kind: ContrastKind
    row_groups: Optional[List[str]] = None
    qmc: QmcConfig = Field(default_factory=QmcConfig)

    @property
    def labels(self) -> List[str]:
        return [r.label for r in self.records]

    @property
    def estimates(self) -> np.ndarray:
        return np.array([r.estimate for r in self.records])

    @property
    def standard_errors(self) -> np.ndarray:
        return np.array([r.se for r in self.records])

    @property
    def t_values(self) -> np.ndarray:
        return np.array([r.t for r in self.records])

    @property
    def p_adjusted(self) -> np.ndarray:
        return np.array([r.p_adjusted for r in self.records])

    @property
    def p_raw(self) -> np.ndarray:
        return np.array([r.p_raw for r in self.records])


class ContrastStatistics(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    estimate: np.ndarray
    se: np.ndarray
    t: np.ndarray
    correlation: CorrelationMatrix
    df: int


def contrast_statistics(model: FittedCellMeansModel, c: ContrastMatrix, cov: CovarianceEstimate) -> ContrastStatistics:
    if c.m != model.n_cells:
        raise ContrastError(f"contrast matrix has {c.m} columns but the model has {model.n_cells} cells")
    if model.degenerate and cov.estimator == CovarianceKind.CLASSICAL:
        raise DegenerateDataError("residual variance is zero; t statistics are undefined")
    if cov.df < 1:
        raise DegenerateDataError(f"degrees of freedom must be at least 1, got {cov.df}")

    estimate = c.rows @ model.cell_means
    variance = np.diag(contrast_covariance(c, cov))
    if np.any(variance <= 0.0):
        bad = [c.row_labels[i] for i in np.flatnonzero(variance <= 0.0)[:3]]
        raise DegenerateDataError(f"zero standard error for contrast(s): {', '.join(bad)}")
    correlation = correlation_from_contrasts(c, cov)
    se = np.sqrt(variance)
    return ContrastStatistics(estimate=estimate, se=se, t=estimate / se, correlation=correlation, df=cov.df)


def raw_pvalues(t: np.ndarray, df: int, alternative: Alternative) -> np.ndarray:
    if alternative == Alternative.TWO_SIDED:
        return 2.0 * stats.t.sf(np.abs(t), df)
    if alternative == Alternative.GREATER:
        return stats.t.sf(t, df)
    return stats.t.cdf(t, df)


def _single_step_p(
    t: float,
    r: CorrelationMatrix,
    df: int,
    alternative: Alternative,
    cfg: QmcConfig,
) -> MvtEstimate:
    """1 - P(all coordinates inside the box set by the observed statistic)"""
    q = r.q
    if alternative == Alternative.TWO_SIDED:
        lower, upper = np.full(q, -abs(t)), np.full(q, abs(t))
    elif alternative == Alternative.GREATER:
        lower, upper = np.full(q, -np.inf), np.full(q, t)
    else:
        lower, upper = np.full(q, t), np.full(q, np.inf)
    inside = mvt_rectangle_probability(lower, upper, r, df, cfg)
    return inside._replace(value=1.0 - inside.value)


def max_t_test(
    model: FittedCellMeansModel,
    c: ContrastMatrix,
    cov: CovarianceEstimate,
    alternative: Alternative = Alternative.TWO_SIDED,
    alpha: float = 0.05,
    cfg: Optional[QmcConfig] = None,
) -> MaxTResult:
    """Single-step max-t test with compatible simultaneous confidence intervals"""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    cfg = cfg or QmcConfig()
    s = contrast_statistics(model, c, cov)
    q = c.q
    p_raw = raw_pvalues(s.t, s.df, alternative)

    evaluated: Dict[float, MvtEstimate] = {}
    p_adjusted = np.empty(q)
    errors = [0.0]
    for j in range(q):
        key = abs(float(s.t[j])) if alternative == Alternative.TWO_SIDED else float(s.t[j])
        if key not in evaluated:
            evaluated[key] = _single_step_p(key, s.correlation, s.df, alternative, cfg)
        estimate = evaluated[key]
        errors.append(estimate.error)
        # the max over q coordinates is never more significant than one of them
        p_adjusted[j] = min(max(estimate.value, p_raw[j]), 1.0)

    critical = equicoordinate_quantile(alpha, s.correlation, s.df, _TAILS[alternative], cfg)
    margin = critical * s.se
    if alternative == Alternative.TWO_SIDED:
        ci_lower, ci_upper = s.estimate - margin, s.estimate + margin
    elif alternative == Alternative.GREATER:
        ci_lower, ci_upper = s.estimate - margin, np.full(q, np.inf)
    else:
        ci_lower, ci_upper = np.full(q, -np.inf), s.estimate + margin

    mvt_error = float(max(errors))
    slack = 3.0 * mvt_error + QUANTILE_PROBABILITY_TOLERANCE
    records = [
        ContrastRecord(
            label=c.row_labels[j],
            estimate=float(s.estimate[j]),
            se=float(s.se[j]),
            t=float(s.t[j]),
            p_raw=float(p_raw[j]),
            p_adjusted=float(p_adjusted[j]),
            ci_lower=float(ci_lower[j]),
            ci_upper=float(ci_upper[j]),
            borderline=bool(abs(p_adjusted[j] - alpha) <= slack),
        )
        for j in range(q)
    ]
    logger.info(
        f"Max-t test: q={q}, df={s.df}, {alternative.value}, t*={critical:.4f}, "
        f"min p_adj={p_adjusted.min():.4g}, mvt error={mvt_error:.1e}"
    )
    return MaxTResult(
        records=records,
        alternative=alternative,
        alpha=alpha,
        df=s.df,
        correlation=s.correlation,
        critical_value=critical,
        estimator=cov.estimator,
        mvt_error=mvt_error,
        contrast_kind=c.kind,
        row_groups=c.row_groups,
        qmc=cfg,
    )


def simultaneous_ci(result: MaxTResult, equivalence: bool = False) -> List[Tuple[str, float, float]]:
    """(label, lower, upper) per contrast.

    With ``equivalence`` the intervals are two-sided at level 1 - 2*alpha,
    the similarity reading of the test.
    """
    if not equivalence:
        return [(r.label, r.ci_lower, r.ci_upper) for r in result.records]

    critical = equivalence_critical_value(result)
    return [(r.label, r.estimate - critical * r.se, r.estimate + critical * r.se) for r in result.records]


def equivalence_critical_value(result: MaxTResult) -> float:
    level = 2.0 * result.alpha
    if level > 0.5:
        raise ValueError(f"equivalence intervals need alpha <= 0.25, got {result.alpha}")
    return equicoordinate_quantile(level, result.correlation, result.df, Tail.TWO_SIDED_BOX, result.qmc)


def min_adjusted_pvalue(
    model: FittedCellMeansModel,
    c: ContrastMatrix,
    cov: CovarianceEstimate,
    alternative: Alternative = Alternative.TWO_SIDED,
    cfg: Optional[QmcConfig] = None,
) -> MvtEstimate:
    """Smallest single-step adjusted p-value with one probability evaluation"""
    cfg = cfg or QmcConfig()
    s = contrast_statistics(model, c, cov)
    if alternative == Alternative.TWO_SIDED:
        extreme = float(np.max(np.abs(s.t)))
    elif alternative == Alternative.GREATER:
        extreme = float(np.max(s.t))
    else:
        extreme = float(np.min(s.t))
    estimate = _single_step_p(extreme, s.correlation, s.df, alternative, cfg)
    p_raw = float(raw_pvalues(np.array([extreme]), s.df, alternative)[0])
    return estimate._replace(value=min(max(estimate.value, p_raw), 1.0))


# Equivalence reading

class EquivalenceMode(str, Enum):
    IUT_UIT = "iut-uit"
    IUT_IUT = "iut-iut"


class GlobalVerdict(str, Enum):
    GLOBAL = "GlobalEquivalence"
    PARTIAL = "PartialEquivalence"
    NONE = "NoEquivalence"


class EquivalencePolicy(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: EquivalenceMode = EquivalenceMode.IUT_UIT
    p_threshold: float = 0.10
    alpha: float = 0.05

    @model_validator(mode="after")
    def _check_levels(self) -> "EquivalencePolicy":
        if not 0.0 < self.alpha <= self.p_threshold < 1.0:
            raise ValueError(
                f"need 0 < alpha <= p_threshold < 1, got alpha={self.alpha}, p_threshold={self.p_threshold}"
            )
        return self


class ContrastVerdict(BaseModel):
    label: str
    lab: str
    p_used: float
    equivalent: bool


class LabVerdict(BaseModel):
    lab: str
    all_equivalent: bool
    min_p: float
    n_contrasts: int


class EquivalenceReport(BaseModel):
    policy: EquivalencePolicy
    contrasts: List[ContrastVerdict]
    per_lab: List[LabVerdict]
    global_verdict: GlobalVerdict
    equivalent_labs: List[str] = Field(default_factory=list)

    @property
    def global_label(self) -> str:
        if self.global_verdict == GlobalVerdict.PARTIAL:
            return f"{self.global_verdict.value}({', '.join(self.equivalent_labs)})"
        return self.global_verdict.value


def _lab_of(label: str, group: Optional[str]) -> str:
    # row groups are exact; labels are ambiguous when a lab name contains " - "
    if group is not None:
        return group
    parsed = parse_interaction_label(label)
    if parsed is not None:
        return parsed.lab
    raise ContrastError(f"cannot identify the laboratory of contrast '{label}'")


def equivalence_from_pvalues(
    labels: Sequence[str],
    p_values: Sequence[float],
    policy: EquivalencePolicy,
    groups: Optional[Sequence[str]] = None,
) -> EquivalenceReport:
    if len(labels) != len(p_values):
        raise ContrastError(f"{len(labels)} labels for {len(p_values)} p-values")
    if not labels:
        raise ContrastError("no contrasts to judge")

    verdicts: List[ContrastVerdict] = []
    for i, (label, p) in enumerate(zip(labels, p_values)):
        lab = _lab_of(label, groups[i] if groups is not None else None)
        # "p > threshold" is strict: p = 0.100 is not equivalent at 0.10
        verdicts.append(ContrastVerdict(label=label, lab=lab, p_used=float(p), equivalent=bool(p > policy.p_threshold)))

    per_lab: List[LabVerdict] = []
    for lab in dict.fromkeys(v.lab for v in verdicts):
        block = [v for v in verdicts if v.lab == lab]
        per_lab.append(LabVerdict(
            lab=lab,
            all_equivalent=all(v.equivalent for v in block),
            min_p=min(v.p_used for v in block),
            n_contrasts=len(block),
        ))

    equivalent_labs = [entry.lab for entry in per_lab if entry.all_equivalent]
    if all(v.equivalent for v in verdicts):
        verdict = GlobalVerdict.GLOBAL
    elif equivalent_labs:
        verdict = GlobalVerdict.PARTIAL
    else:
        verdict = GlobalVerdict.NONE

    report = EquivalenceReport(
        policy=policy,
        contrasts=verdicts,
        per_lab=per_lab,
        global_verdict=verdict,
        equivalent_labs=equivalent_labs,
    )
    logger.info(f"Equivalence ({policy.mode.value}, p > {policy.p_threshold}): {report.global_label}")
    return report


def equivalence_report(
    result: MaxTResult,
    raw_results: Optional[Sequence[float]] = None,
    policy: Optional[EquivalencePolicy] = None,
) -> EquivalenceReport:
    """IUT-UIT reads the adjusted p-values, IUT-IUT the marginal ones"""
    policy = policy or EquivalencePolicy()
    if policy.mode == EquivalenceMode.IUT_UIT:
        p_used = list(result.p_adjusted)
    else:
        p_used = list(raw_results) if raw_results is not None else list(result.p_raw)
    return equivalence_from_pvalues(result.labels, p_used, policy, result.row_groups)
