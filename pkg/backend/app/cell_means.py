"""
Cell-means model fit, classical and sandwich covariance of the cell means,
and the classical two-way interaction F-test
"""

import logging
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import stats

from app.data_service import Dataset
from app.errors import DataError, DegenerateDataError, LayoutError
from app.models import CovarianceKind, FactorLevels

logger = logging.getLogger(__name__)


class FittedCellMeansModel(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    cell_means: np.ndarray
    cell_sizes: np.ndarray
    cell_labels: List[Tuple[str, str]]
    cell_index: np.ndarray
    residuals: np.ndarray
    df_resid: int
    pooled_variance: float
    degenerate: bool = False
    lab_factor: FactorLevels
    dose_factor: FactorLevels

    @property
    def n_obs(self) -> int:
        return int(self.residuals.size)

    @property
    def n_cells(self) -> int:
        return int(self.cell_means.size)

    @property
    def rss(self) -> float:
        return float(self.residuals @ self.residuals)


class CovarianceEstimate(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    matrix: np.ndarray
    estimator: CovarianceKind
    df: int


class FTestResult(BaseModel):
    F: float
    df1: int
    df2: int
    p: float


def fit_cell_means(d: Dataset) -> FittedCellMeansModel:
    y = d.responses
    idx = d.cell_index
    n_cells = d.n_cells
    n_obs = y.size

    sizes = np.bincount(idx, minlength=n_cells)
    if np.any(sizes == 0):
        empty = [f"(lab {lab}, dose {dose})" for (lab, dose), n in zip(d.cell_labels, sizes) if n == 0]
        raise LayoutError(f"empty cell(s): {', '.join(empty)}")

    df_resid = n_obs - n_cells
    if df_resid <= 0:
        raise DegenerateDataError(
            f"df_resid = N - K = {n_obs} - {n_cells} = {df_resid}; at least one cell needs a replicate"
        )

    means = np.bincount(idx, weights=y, minlength=n_cells) / sizes
    residuals = y - means[idx]
    # one refinement pass so that residuals sum to zero within each cell
    correction = np.bincount(idx, weights=residuals, minlength=n_cells) / sizes
    means = means + correction
    residuals = y - means[idx]

    rss = float(residuals @ residuals)
    pooled_variance = rss / df_resid
    # relative to the spread of the responses, not their level
    degenerate = pooled_variance <= np.finfo(float).eps * n_obs * float(np.var(y))
    if degenerate:
        logger.warning("Residual variance is zero; t statistics of the contrasts are undefined")

    logger.info(f"Fitted cell-means model: N={n_obs}, K={n_cells}, df={df_resid}, S^2={pooled_variance:.6g}")
    return FittedCellMeansModel(
        cell_means=means,
        cell_sizes=sizes,
        cell_labels=d.cell_labels,
        cell_index=idx,
        residuals=residuals,
        df_resid=df_resid,
        pooled_variance=pooled_variance,
        degenerate=bool(degenerate),
        lab_factor=d.lab_factor,
        dose_factor=d.dose_factor,
    )


def _hc_observation_weights(m: FittedCellMeansModel, kind: CovarianceKind) -> np.ndarray:
    n_obs, n_cells = m.n_obs, m.n_cells
    if kind == CovarianceKind.HC0:
        return np.ones(n_obs)
    if kind == CovarianceKind.HC1:
        return np.full(n_obs, n_obs / (n_obs - n_cells))
    if kind == CovarianceKind.HC3:
        singletons = [f"(lab {lab}, dose {dose})" for (lab, dose), n in zip(m.cell_labels, m.cell_sizes) if n < 2]
        if singletons:
            raise DataError(f"HC3 needs at least 2 observations per cell; singleton cell(s): {', '.join(singletons)}")
        leverage = 1.0 / m.cell_sizes[m.cell_index]
        return 1.0 / (1.0 - leverage) ** 2
    raise DataError(f"not a sandwich estimator: {kind.value}")


def covariance(m: FittedCellMeansModel, kind: CovarianceKind = CovarianceKind.HC3) -> CovarianceEstimate:
    """Covariance of the cell means.

    The cell-means design is orthogonal, so every estimator is diagonal:
    classical S^2 / n_c, HC0 sum(e^2)_c / n_c^2, HC1 = HC0 * N / (N - K),
    HC3 sum(e^2 / (1 - 1/n_c)^2)_c / n_c^2. Degrees of freedom stay N - K.
    """
    sizes = m.cell_sizes.astype(float)
    if kind == CovarianceKind.CLASSICAL:
        diagonal = m.pooled_variance / sizes
    else:
        weights = _hc_observation_weights(m, kind)
        meat = np.bincount(m.cell_index, weights=weights * m.residuals ** 2, minlength=m.n_cells)
        diagonal = meat / sizes ** 2

    logger.debug(f"{kind.value} covariance: diagonal range [{diagonal.min():.4g}, {diagonal.max():.4g}]")
    return CovarianceEstimate(matrix=np.diag(diagonal), estimator=kind, df=m.df_resid)


def design_matrix(m: FittedCellMeansModel) -> np.ndarray:
    """Explicit N x K indicator design of the cell-means model"""
    X = np.zeros((m.n_obs, m.n_cells))
    X[np.arange(m.n_obs), m.cell_index] = 1.0
    return X


def sandwich_reference(m: FittedCellMeansModel, kind: CovarianceKind) -> np.ndarray:
    """Generic bread . meat . bread evaluated on the explicit design matrix"""
    X = design_matrix(m)
    bread = np.linalg.inv(X.T @ X)
    if kind == CovarianceKind.CLASSICAL:
        return m.pooled_variance * bread

    n_obs, n_params = X.shape
    leverage = np.einsum("ij,jk,ik->i", X, bread, X)
    e2 = m.residuals ** 2
    if kind == CovarianceKind.HC0:
        omega = e2
    elif kind == CovarianceKind.HC1:
        omega = e2 * n_obs / (n_obs - n_params)
    elif kind == CovarianceKind.HC3:
        omega = e2 / (1.0 - leverage) ** 2
    else:
        raise DataError(f"unknown estimator {kind}")
    meat = X.T @ (omega[:, None] * X)
    return bread @ meat @ bread


def interaction_f_test(d: Dataset) -> FTestResult:
    """Two-way ANOVA test of lab-by-dose interaction.

    The interaction sum of squares is the weighted distance of the cell
    means from their best additive (lab + dose) fit, which equals
    RSS(additive) - RSS(cell means) for any crossed layout.
    """
    fit = fit_cell_means(d)
    n_labs, n_doses = d.n_labs, d.n_doses
    if n_labs < 2:
        raise DegenerateDataError(f"interaction F-test needs at least 2 labs, got {n_labs}")
    sizes = fit.cell_sizes.astype(float)

    lab_of_cell = np.repeat(np.arange(n_labs), n_doses)
    dose_of_cell = np.tile(np.arange(n_doses), n_labs)
    X_add = np.column_stack([
        np.ones(fit.n_cells),
        (lab_of_cell[:, None] == np.arange(1, n_labs)[None, :]).astype(float),
        (dose_of_cell[:, None] == np.arange(1, n_doses)[None, :]).astype(float),
    ])
    w = np.sqrt(sizes)
    beta, *_ = np.linalg.lstsq(X_add * w[:, None], fit.cell_means * w, rcond=None)
    deviation = fit.cell_means - X_add @ beta
    ss_interaction = float(np.sum(sizes * deviation ** 2))

    df1 = (n_labs - 1) * (n_doses - 1)
    df2 = fit.df_resid
    if fit.degenerate:
        raise DegenerateDataError("interaction F-test undefined: residual variance is zero")

    F = max(ss_interaction / df1, 0.0) / fit.pooled_variance
    p = float(stats.f.sf(F, df1, df2))
    logger.info(f"Interaction F-test: F({df1}, {df2}) = {F:.4f}, p = {p:.4g}")
    return FTestResult(F=F, df1=df1, df2=df2, p=p)


def cell_summary(m: FittedCellMeansModel) -> List[Dict[str, Any]]:
    """Per-cell table: lab, dose, n, mean, sd"""
    sq = np.bincount(m.cell_index, weights=m.residuals ** 2, minlength=m.n_cells)
    rows = []
    for c, (lab, dose) in enumerate(m.cell_labels):
        n = int(m.cell_sizes[c])
        sd: Optional[float] = float(np.sqrt(sq[c] / (n - 1))) if n > 1 else None
        rows.append({"lab": lab, "dose": dose, "n": n, "mean": float(m.cell_means[c]), "sd": sd})
    return rows
