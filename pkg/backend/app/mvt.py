"""
Multivariate t probabilities over hyper-rectangles and equicoordinate quantiles.

Probabilities are computed with randomized quasi-Monte Carlo on the
separation-of-variables form of the integral: the correlation matrix is
factored with a pivoted Cholesky decomposition (Genz variable reordering),
the coordinates are sampled one at a time from their conditional normal
intervals, and finite degrees of freedom enter through a chi-distributed
radial variable. Points come from an extensible Kronecker lattice with
random shifts and the baker's transform; the error is the standard error
across the shifts.
"""

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import optimize, special, stats

from app.cell_means import CovarianceEstimate
from app.errors import BudgetExhaustedWarning, ConvergenceError, DegenerateDataError, NonPositiveDefiniteError
from app.models import ContrastMatrix

logger = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-8
SYMMETRY_TOLERANCE = 1e-10
# conditional variances below this are treated as exact linear dependence
DEGENERATE_VARIANCE = 1e-10
MAX_TOTAL_POINTS = 10_000_000
INITIAL_POINTS = 1024
CHUNK_POINTS = 1 << 15

_U_LOW = np.finfo(float).tiny
_U_HIGH = 1.0 - np.finfo(float).epsneg


class Tail(str, Enum):
    TWO_SIDED_BOX = "two-sided-box"
    LOWER_ONE_SIDED = "lower-one-sided"
    UPPER_ONE_SIDED = "upper-one-sided"


class QmcConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    sample_budget: int = Field(100_000, ge=1000)
    randomizations: int = Field(12, ge=8)
    seed: int = Field(20210, ge=0, lt=2 ** 64)
    target_abs_error: float = Field(1e-4, gt=0.0, le=0.01)
    workers: int = Field(1, ge=1)

    @property
    def points_per_shift(self) -> int:
        return min(self.sample_budget, MAX_TOTAL_POINTS // self.randomizations)


class MvtEstimate(NamedTuple):
    value: float
    error: float
    converged: bool = True
    n_points: int = 0


class CorrelationMatrix(BaseModel):
    """Symmetric, unit-diagonal, positive semidefinite correlation matrix"""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    entries: np.ndarray

    @field_validator("entries", mode="before")
    @classmethod
    def _check_entries(cls, value) -> np.ndarray:
        r = np.array(value, dtype=float, ndmin=2, copy=True)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise ValueError(f"correlation matrix must be square, got shape {r.shape}")
        if not np.all(np.isfinite(r)):
            raise ValueError("correlation matrix has non-finite entries")
        if np.max(np.abs(r - r.T), initial=0.0) > SYMMETRY_TOLERANCE:
            raise ValueError("correlation matrix is not symmetric")
        if np.max(np.abs(np.diag(r) - 1.0)) > SYMMETRY_TOLERANCE:
            raise ValueError("correlation matrix must have a unit diagonal")
        if np.max(np.abs(r)) > 1.0 + SYMMETRY_TOLERANCE:
            raise ValueError("correlation entries must lie in [-1, 1]")
        r.setflags(write=False)
        return r

    @property
    def q(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def from_array(cls, a: np.ndarray) -> "CorrelationMatrix":
        """Symmetrize, repair small negative eigenvalues and renormalize the diagonal"""
        a = np.array(a, dtype=float, ndmin=2)
        a = 0.5 * (a + a.T)
        eigenvalues, vectors = np.linalg.eigh(a)
        smallest = float(eigenvalues.min())
        if smallest < -PSD_TOLERANCE:
            raise NonPositiveDefiniteError(f"matrix is not positive semidefinite: smallest eigenvalue {smallest:.3g}")
        if smallest < 0.0:
            a = (vectors * np.clip(eigenvalues, 0.0, None)) @ vectors.T
            logger.debug(f"Clipped eigenvalue {smallest:.3g} to 0")
        d = np.sqrt(np.diag(a))
        if np.any(d <= 0.0):
            raise NonPositiveDefiniteError("matrix has a zero diagonal entry")
        r = np.clip(a / np.outer(d, d), -1.0, 1.0)
        r = 0.5 * (r + r.T)
        np.fill_diagonal(r, 1.0)
        return cls(entries=r)

    @classmethod
    def identity(cls, q: int) -> "CorrelationMatrix":
        return cls(entries=np.eye(q))

    def subset(self, index: np.ndarray) -> "CorrelationMatrix":
        return CorrelationMatrix(entries=self.entries[np.ix_(index, index)])


def contrast_covariance(c: ContrastMatrix, sigma: CovarianceEstimate) -> np.ndarray:
    if c.m != sigma.matrix.shape[0]:
        raise DegenerateDataError(f"contrast has {c.m} columns but the covariance is {sigma.matrix.shape[0]}-dimensional")
    return c.rows @ sigma.matrix @ c.rows.T


def correlation_from_contrasts(c: ContrastMatrix, sigma: CovarianceEstimate) -> CorrelationMatrix:
    """R = D^-1/2 (C S C') D^-1/2 with D the diagonal of C S C'"""
    cov = contrast_covariance(c, sigma)
    variances = np.diag(cov)
    scale = max(float(np.max(np.abs(cov))), np.finfo(float).tiny)
    zero = np.flatnonzero(variances <= 1e-14 * scale)
    if zero.size or scale <= np.finfo(float).tiny:
        names = ", ".join(c.row_labels[i] for i in zero[:3]) or "all contrasts"
        raise DegenerateDataError(f"contrast(s) with zero variance: {names}")
    return CorrelationMatrix.from_array(cov / np.sqrt(np.outer(variances, variances)))


# QMC engine

def _first_primes(count: int) -> np.ndarray:
    limit = max(16, int(count * (math.log(count + 2) + math.log(math.log(count + 3)) + 3)))
    sieve = np.ones(limit + 1, dtype=bool)
    sieve[:2] = False
    for i in range(2, int(limit ** 0.5) + 1):
        if sieve[i]:
            sieve[i * i :: i] = False
    return np.flatnonzero(sieve)[:count]


def _lattice_generator(dim: int) -> np.ndarray:
    """Richtmyer generator: fractional parts of square roots of the first primes"""
    roots = np.sqrt(_first_primes(dim).astype(float))
    return roots - np.floor(roots)


class _Factor(NamedTuple):
    lower: np.ndarray
    upper: np.ndarray
    cholesky: np.ndarray
    sd: np.ndarray
    order: np.ndarray


def _reorder_and_factor(lower: np.ndarray, upper: np.ndarray, r: np.ndarray) -> _Factor:
    """Pivoted Cholesky that puts the variable with the smallest expected
    conditional interval probability first at each step. Linearly dependent
    variables get a zero pivot and are moved behind the others."""
    q = r.shape[0]
    a, b = lower.copy(), upper.copy()
    cov = r.copy()
    L = np.zeros((q, q))
    order = np.arange(q)
    y = np.zeros(q)
    sd = np.zeros(q)

    for i in range(q):
        remaining = np.arange(i, q)
        cond_var = np.diag(cov)[remaining] - np.sum(L[remaining, :i] ** 2, axis=1)
        shift = L[remaining, :i] @ y[:i]
        probs = np.full(remaining.size, np.inf)
        live = cond_var > DEGENERATE_VARIANCE
        if np.any(live):
            s = np.sqrt(cond_var[live])
            probs[live] = special.ndtr((b[remaining][live] - shift[live]) / s) - special.ndtr(
                (a[remaining][live] - shift[live]) / s
            )
        j = int(remaining[np.argmin(probs)])

        if j != i:
            for arr in (a, b, order):
                arr[[i, j]] = arr[[j, i]]
            cov[[i, j], :] = cov[[j, i], :]
            cov[:, [i, j]] = cov[:, [j, i]]
            L[[i, j], :] = L[[j, i], :]

        v = cov[i, i] - L[i, :i] @ L[i, :i]
        if v <= DEGENERATE_VARIANCE:
            continue
        sd[i] = math.sqrt(v)
        L[i, i] = sd[i]
        below = np.arange(i + 1, q)
        L[below, i] = (cov[below, i] - L[below, :i] @ L[i, :i]) / sd[i]

        mu = L[i, :i] @ y[:i]
        lo, hi = (a[i] - mu) / sd[i], (b[i] - mu) / sd[i]
        mass = special.ndtr(hi) - special.ndtr(lo)
        if mass > 0.0:
            pdf_lo = 0.0 if np.isinf(lo) else math.exp(-0.5 * lo * lo)
            pdf_hi = 0.0 if np.isinf(hi) else math.exp(-0.5 * hi * hi)
            y[i] = (pdf_lo - pdf_hi) / (math.sqrt(2.0 * math.pi) * mass)

    return _Factor(lower=a, upper=b, cholesky=L, sd=sd, order=order)


def _integrand(u: np.ndarray, f: _Factor, df: float) -> np.ndarray:
    n_points = u.shape[0]
    q = f.cholesky.shape[0]
    col = 0
    if math.isinf(df):
        radius = np.ones(n_points)
    else:
        radius = stats.chi.ppf(u[:, 0], df) / math.sqrt(df)
        col = 1

    w = np.zeros((n_points, q))
    value = np.ones(n_points)
    for i in range(q):
        s = w[:, :i] @ f.cholesky[i, :i]
        lo = f.lower[i] * radius - s
        hi = f.upper[i] * radius - s
        if f.sd[i] > 0.0:
            p_lo = special.ndtr(lo / f.sd[i])
            p_hi = special.ndtr(hi / f.sd[i])
            value *= p_hi - p_lo
            if i < q - 1:
                w[:, i] = special.ndtri(np.clip(p_lo + u[:, col] * (p_hi - p_lo), _U_LOW, _U_HIGH))
                col += 1
        else:
            value *= (lo <= 0.0) & (hi >= 0.0)
    return value


def _shift_sum(
    factor: _Factor,
    df: float,
    generator: np.ndarray,
    shift: np.ndarray,
    start: int,
    stop: int,
) -> float:
    total = 0.0
    for lo in range(start, stop, CHUNK_POINTS):
        hi = min(lo + CHUNK_POINTS, stop)
        k = np.arange(lo, hi, dtype=float)[:, None]
        x = np.mod(k * generator[None, :] + shift[None, :], 1.0)
        u = np.clip(1.0 - np.abs(2.0 * x - 1.0), _U_LOW, _U_HIGH)
        total += float(np.sum(_integrand(u, factor, df)))
    return total


def _normalize_df(df: Optional[float]) -> float:
    if df is None:
        return math.inf
    df = float(df)
    if not (df >= 1.0):
        raise ValueError(f"degrees of freedom must be >= 1 or infinite, got {df}")
    return df


def _univariate(lower: float, upper: float, df: float) -> float:
    dist = stats.norm if math.isinf(df) else stats.t(df)
    if upper <= 0.0:
        return float(dist.cdf(upper) - dist.cdf(lower))
    return float(dist.sf(lower) - dist.sf(upper))


def mvt_rectangle_probability(
    lower: np.ndarray,
    upper: np.ndarray,
    r: CorrelationMatrix,
    df: Optional[float],
    cfg: Optional[QmcConfig] = None,
) -> MvtEstimate:
    """P(lower <= T <= upper) for T central multivariate t with correlation r.

    ``df`` of None or inf gives the multivariate normal. Deterministic for a
    fixed ``cfg.seed`` and independent of ``cfg.workers``.
    """
    cfg = cfg or QmcConfig()
    df = _normalize_df(df)
    lower = np.asarray(lower, dtype=float).reshape(-1)
    upper = np.asarray(upper, dtype=float).reshape(-1)
    if lower.size != r.q or upper.size != r.q:
        raise ValueError(f"bounds of length {lower.size}/{upper.size} for a {r.q}-dimensional distribution")
    if np.any(np.isnan(lower)) or np.any(np.isnan(upper)):
        raise ValueError("integration bounds contain NaN")
    if np.any(lower > upper):
        raise ValueError("lower bound exceeds upper bound")
    if np.any(lower == upper):
        return MvtEstimate(0.0, 0.0, True, 0)

    # coordinates unbounded on both sides integrate out exactly
    active = np.flatnonzero(~(np.isneginf(lower) & np.isposinf(upper)))
    if active.size == 0:
        return MvtEstimate(1.0, 0.0, True, 0)
    if active.size == 1:
        i = int(active[0])
        return MvtEstimate(_univariate(lower[i], upper[i], df), 0.0, True, 0)

    sub = r.entries[np.ix_(active, active)]
    factor = _reorder_and_factor(lower[active], upper[active], sub)
    dim = active.size + (0 if math.isinf(df) else 1)
    generator = _lattice_generator(dim)
    shifts = [
        np.random.default_rng(np.random.SeedSequence([cfg.seed, s])).random(dim)
        for s in range(cfg.randomizations)
    ]

    budget = cfg.points_per_shift
    sums = np.zeros(cfg.randomizations)
    start, stop = 0, min(INITIAL_POINTS, budget)
    executor = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        while True:
            if executor is None:
                parts = [_shift_sum(factor, df, generator, shift, start, stop) for shift in shifts]
            else:
                parts = list(executor.map(lambda sh: _shift_sum(factor, df, generator, sh, start, stop), shifts))
            sums += np.asarray(parts)
            means = sums / stop
            value = float(np.mean(means))
            error = float(np.std(means, ddof=1) / math.sqrt(cfg.randomizations))
            logger.debug(f"QMC q={active.size} df={df}: {stop} points/shift, p={value:.6f}, err={error:.2e}")
            if error <= cfg.target_abs_error or stop >= budget:
                break
            start, stop = stop, min(2 * stop, budget)
    finally:
        if executor is not None:
            executor.shutdown()

    converged = error <= cfg.target_abs_error
    if not converged:
        message = (
            f"QMC budget of {budget} points x {cfg.randomizations} shifts exhausted with error "
            f"{error:.2e} above target {cfg.target_abs_error:.0e}"
        )
        logger.warning(message)
        warnings.warn(message, BudgetExhaustedWarning, stacklevel=2)
    return MvtEstimate(float(np.clip(value, 0.0, 1.0)), error, converged, stop * cfg.randomizations)


def mc_rectangle_probability(
    lower: np.ndarray,
    upper: np.ndarray,
    r: CorrelationMatrix,
    df: Optional[float],
    n_samples: int = 1_000_000,
    seed: int = 0,
) -> MvtEstimate:
    """Plain Monte Carlo reference: correlated normals over an independent chi radius"""
    df = _normalize_df(df)
    lower = np.asarray(lower, dtype=float).reshape(-1)
    upper = np.asarray(upper, dtype=float).reshape(-1)
    rng = np.random.default_rng(seed)

    eigenvalues, vectors = np.linalg.eigh(r.entries)
    root = vectors * np.sqrt(np.clip(eigenvalues, 0.0, None))

    hits = 0
    for lo in range(0, n_samples, 100_000):
        n = min(100_000, n_samples - lo)
        z = rng.standard_normal((n, r.q)) @ root.T
        if not math.isinf(df):
            z /= np.sqrt(rng.chisquare(df, n) / df)[:, None]
        hits += int(np.count_nonzero(np.all((z >= lower) & (z <= upper), axis=1)))

    p = hits / n_samples
    return MvtEstimate(p, math.sqrt(max(p * (1.0 - p), 1.0 / n_samples) / n_samples), True, n_samples)


def box_for(t: float, q: int, tail: Tail) -> Tuple[np.ndarray, np.ndarray]:
    if tail == Tail.TWO_SIDED_BOX:
        return np.full(q, -t), np.full(q, t)
    if tail == Tail.UPPER_ONE_SIDED:
        return np.full(q, -np.inf), np.full(q, t)
    return np.full(q, -t), np.full(q, np.inf)


def equicoordinate_quantile(
    alpha: float,
    r: CorrelationMatrix,
    df: Optional[float],
    tail: Tail = Tail.TWO_SIDED_BOX,
    cfg: Optional[QmcConfig] = None,
) -> float:
    """Smallest t* whose equicoordinate box has probability >= 1 - alpha.

    The search is bracketed by the unadjusted and the Bonferroni quantiles.
    Every evaluation reuses the same lattice shifts, so the probability is a
    deterministic nondecreasing function of t that Brent's method can root.
    """
    if not (0.0 < alpha <= 0.5):
        raise ValueError(f"alpha must lie in (0, 0.5], got {alpha}")
    cfg = cfg or QmcConfig()
    df = _normalize_df(df)
    q = r.q
    dist = stats.norm if math.isinf(df) else stats.t(df)
    sides = 2.0 if tail == Tail.TWO_SIDED_BOX else 1.0
    low = float(dist.isf(alpha / sides))
    if q == 1:
        return low

    def excess(t: float) -> float:
        lo, hi = box_for(t, q, tail)
        return mvt_rectangle_probability(lo, hi, r, df, cfg).value - (1.0 - alpha)

    if excess(low) >= 0.0:
        logger.info(f"Equicoordinate quantile reached at the unadjusted bound {low:.4f}")
        return low

    high = float(dist.isf(alpha / (sides * q)))
    for _ in range(20):
        if excess(high) >= 0.0:
            break
        low, high = high, high * 1.5
    else:
        raise ConvergenceError(f"could not bracket the equicoordinate quantile (alpha={alpha}, q={q})")

    try:
        t_star = optimize.brentq(excess, low, high, xtol=1e-5, maxiter=100)
    except (RuntimeError, ValueError) as e:
        raise ConvergenceError(f"quantile search did not converge: {e}") from e
    logger.info(f"Equicoordinate quantile q={q}, df={df}, alpha={alpha}, {tail.value}: {t_star:.4f}")
    return float(t_star)
