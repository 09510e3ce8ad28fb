import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy import stats

from app.cell_means import CovarianceEstimate, covariance, fit_cell_means
from app.contrasts import (
    grand_mean_matrix,
    kronecker_interaction,
    make_dose_factor,
    make_lab_factor,
    williams_matrix,
)
from app.errors import BudgetExhaustedWarning, DegenerateDataError, NonPositiveDefiniteError
from app.models import CovarianceKind
from app.mvt import (
    CorrelationMatrix,
    QmcConfig,
    Tail,
    box_for,
    correlation_from_contrasts,
    equicoordinate_quantile,
    mc_rectangle_probability,
    mvt_rectangle_probability,
)


def equicorrelated(q, rho):
    r = np.full((q, q), rho)
    np.fill_diagonal(r, 1.0)
    return CorrelationMatrix(entries=r)


def identity_covariance(m, df=10):
    return CovarianceEstimate(matrix=np.eye(m), estimator=CovarianceKind.CLASSICAL, df=df)


def interaction_correlation(labs, doses):
    c = kronecker_interaction(grand_mean_matrix(make_lab_factor(labs)), williams_matrix(make_dose_factor(doses)))
    return correlation_from_contrasts(c, identity_covariance(c.m))


def combined_tolerance(a, b, sigmas=4.0):
    return sigmas * math.hypot(a.error, b.error) + 1e-4


def test_single_coordinate_is_student_t():
    r = CorrelationMatrix.identity(1)
    p = mvt_rectangle_probability([-np.inf], [1.812], r, 10)
    assert p.value == pytest.approx(0.95, abs=1e-3)
    assert p.error == 0.0


def test_unbounded_box_has_probability_one():
    r = equicorrelated(4, 0.3)
    p = mvt_rectangle_probability(np.full(4, -np.inf), np.full(4, np.inf), r, 7)
    assert p.value == 1.0
    assert p.error == 0.0


def test_empty_box_has_probability_zero():
    r = equicorrelated(2, 0.3)
    assert mvt_rectangle_probability([0.0, -1.0], [0.0, 1.0], r, 7).value == 0.0


def test_invalid_bounds():
    r = equicorrelated(2, 0.3)
    with pytest.raises(ValueError):
        mvt_rectangle_probability([1.0, 0.0], [0.0, 1.0], r, 5)
    with pytest.raises(ValueError):
        mvt_rectangle_probability([np.nan, 0.0], [1.0, 1.0], r, 5)
    with pytest.raises(ValueError):
        mvt_rectangle_probability([0.0], [1.0], r, 5)
    with pytest.raises(ValueError):
        mvt_rectangle_probability([-1.0, -1.0], [1.0, 1.0], r, 0.5)


@pytest.mark.parametrize("df", [4, 15, None])
def test_orthant_probability_closed_form(df, fast_qmc):
    # P(all T_i > 0) = 1/8 + 3 asin(rho) / (4 pi) for three exchangeable coordinates
    r = equicorrelated(3, 0.5)
    p = mvt_rectangle_probability(np.zeros(3), np.full(3, np.inf), r, df, fast_qmc)
    assert p.value == pytest.approx(0.25, abs=2e-3)


def test_bivariate_matches_monte_carlo(fast_qmc):
    r = equicorrelated(2, 0.5)
    lower, upper = box_for(2.0, 2, Tail.TWO_SIDED_BOX)
    qmc = mvt_rectangle_probability(lower, upper, r, 10, fast_qmc)
    mc = mc_rectangle_probability(lower, upper, r, 10, n_samples=1_000_000, seed=3)
    assert abs(qmc.value - mc.value) <= combined_tolerance(qmc, mc)


def test_independent_normal_box_is_product():
    r = CorrelationMatrix.identity(3)
    p = mvt_rectangle_probability(np.full(3, -2.0), np.full(3, 2.0), r, None)
    assert p.value == pytest.approx((stats.norm.cdf(2.0) - stats.norm.cdf(-2.0)) ** 3, abs=1e-10)


def test_williams_rows_correlation():
    c = williams_matrix(make_dose_factor(2))
    r = correlation_from_contrasts(c, identity_covariance(c.m))
    assert r.entries[0, 1] == pytest.approx(math.sqrt(3) / 2, abs=1e-4)


def test_zero_variance_contrast_is_rejected():
    c = williams_matrix(make_dose_factor(2))
    cov = CovarianceEstimate(matrix=np.diag([0.0, 0.0, 0.0]), estimator=CovarianceKind.HC0, df=5)
    with pytest.raises(DegenerateDataError):
        correlation_from_contrasts(c, cov)


def test_correlation_matrix_validation():
    with pytest.raises(NonPositiveDefiniteError):
        CorrelationMatrix.from_array(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValidationError):
        CorrelationMatrix(entries=[[1.0, 0.5], [0.4, 1.0]])
    with pytest.raises(ValidationError):
        CorrelationMatrix(entries=[[2.0, 0.0], [0.0, 1.0]])

    r = CorrelationMatrix(entries=[[1.0, 0.2], [0.2, 1.0]])
    with pytest.raises(ValueError):
        r.entries[0, 1] = 0.9


def test_round_off_negative_eigenvalue_is_clipped():
    a = np.array([[1.0, 1.0 + 5e-11], [1.0 + 5e-11, 1.0]])
    r = CorrelationMatrix.from_array(a)
    np.testing.assert_array_equal(np.diag(r.entries), 1.0)
    assert np.linalg.eigvalsh(r.entries).min() >= -1e-12


def test_deterministic_and_independent_of_workers(fast_qmc):
    r = equicorrelated(4, 0.4)
    lower, upper = box_for(2.2, 4, Tail.TWO_SIDED_BOX)
    first = mvt_rectangle_probability(lower, upper, r, 8, fast_qmc)
    second = mvt_rectangle_probability(lower, upper, r, 8, fast_qmc)
    threaded = mvt_rectangle_probability(lower, upper, r, 8, fast_qmc.model_copy(update={"workers": 2}))
    assert first == second
    assert threaded.value == first.value
    assert threaded.error == first.error


def test_different_seeds_agree_within_error(fast_qmc):
    r = equicorrelated(4, 0.4)
    lower, upper = box_for(2.2, 4, Tail.TWO_SIDED_BOX)
    a = mvt_rectangle_probability(lower, upper, r, 8, fast_qmc)
    b = mvt_rectangle_probability(lower, upper, r, 8, fast_qmc.model_copy(update={"seed": 99}))
    assert abs(a.value - b.value) <= combined_tolerance(a, b)


def test_monotone_in_box_size(fast_qmc):
    r = equicorrelated(3, 0.6)
    values = [
        mvt_rectangle_probability(*box_for(t, 3, Tail.TWO_SIDED_BOX), r, 6, fast_qmc).value
        for t in (1.5, 2.0, 2.5, 3.0)
    ]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_permutation_invariance(fast_qmc):
    entries = np.array([
        [1.0, 0.6, 0.2, -0.1],
        [0.6, 1.0, 0.3, 0.0],
        [0.2, 0.3, 1.0, 0.4],
        [-0.1, 0.0, 0.4, 1.0],
    ])
    lower = np.array([-1.5, -2.0, -np.inf, -1.0])
    upper = np.array([2.0, 1.0, 1.5, np.inf])
    perm = np.array([2, 0, 3, 1])

    base = mvt_rectangle_probability(lower, upper, CorrelationMatrix(entries=entries), 9, fast_qmc)
    permuted = mvt_rectangle_probability(
        lower[perm], upper[perm], CorrelationMatrix(entries=entries[np.ix_(perm, perm)]), 9, fast_qmc
    )
    assert abs(base.value - permuted.value) <= combined_tolerance(base, permuted)


def test_large_df_approaches_normal(fast_qmc):
    r = equicorrelated(3, 0.3)
    lower, upper = box_for(2.0, 3, Tail.TWO_SIDED_BOX)
    t = mvt_rectangle_probability(lower, upper, r, 1e7, fast_qmc)
    z = mvt_rectangle_probability(lower, upper, r, None, fast_qmc)
    assert t.value == pytest.approx(z.value, abs=2e-3)


def test_budget_exhaustion_warns():
    cfg = QmcConfig(sample_budget=1000, randomizations=8, seed=1, target_abs_error=1e-9)
    r = equicorrelated(3, 0.5)
    with pytest.warns(BudgetExhaustedWarning):
        p = mvt_rectangle_probability(*box_for(2.0, 3, Tail.TWO_SIDED_BOX), r, 5, cfg)
    assert not p.converged
    assert p.n_points == 8000


def test_qmc_config_limits():
    with pytest.raises(ValidationError):
        QmcConfig(randomizations=4)
    with pytest.raises(ValidationError):
        QmcConfig(sample_budget=10)
    assert QmcConfig(sample_budget=10_000_000, randomizations=10).points_per_shift == 1_000_000


def test_quantile_single_contrast_is_student_t():
    r = CorrelationMatrix.identity(1)
    assert equicoordinate_quantile(0.05, r, 30) == pytest.approx(2.042, abs=1e-3)
    assert equicoordinate_quantile(0.05, r, 30, Tail.UPPER_ONE_SIDED) == pytest.approx(1.697, abs=1e-3)


def test_quantile_between_unadjusted_and_sidak(fast_qmc):
    r = equicorrelated(2, 0.5)
    t_star = equicoordinate_quantile(0.05, r, 5, cfg=fast_qmc)
    unadjusted = stats.t.isf(0.025, 5)
    sidak = stats.t.isf((1 - 0.95 ** 0.5) / 2, 5)
    assert unadjusted < t_star <= sidak + 1e-3


def test_quantile_decreases_with_alpha(fast_qmc):
    r = equicorrelated(3, 0.5)
    quantiles = [equicoordinate_quantile(a, r, 12, cfg=fast_qmc) for a in (0.01, 0.05, 0.10)]
    assert quantiles[0] > quantiles[1] > quantiles[2]


def test_quantile_rejects_alpha_out_of_range():
    with pytest.raises(ValueError):
        equicoordinate_quantile(0.0, equicorrelated(2, 0.1), 5)
    with pytest.raises(ValueError):
        equicoordinate_quantile(0.6, equicorrelated(2, 0.1), 5)


def test_quantile_round_trip_on_singular_grand_mean_correlation(fast_qmc):
    # seven lab-versus-rest rows have rank six
    c = grand_mean_matrix(make_lab_factor(7))
    r = correlation_from_contrasts(c, identity_covariance(c.m))
    assert np.linalg.matrix_rank(r.entries) == 6

    t_star = equicoordinate_quantile(0.05, r, 20, cfg=fast_qmc)
    p = mvt_rectangle_probability(*box_for(t_star, 7, Tail.TWO_SIDED_BOX), r, 20, fast_qmc)
    assert p.value == pytest.approx(0.95, abs=2e-3)


def test_singular_interaction_correlation_matches_monte_carlo(fast_qmc):
    r = interaction_correlation(3, 2)
    assert r.q == 6
    assert np.linalg.matrix_rank(r.entries) == 4

    lower, upper = box_for(2.3, 6, Tail.TWO_SIDED_BOX)
    qmc = mvt_rectangle_probability(lower, upper, r, 20, fast_qmc)
    mc = mc_rectangle_probability(lower, upper, r, 20, n_samples=400_000, seed=5)
    assert abs(qmc.value - mc.value) <= combined_tolerance(qmc, mc)


def test_one_sided_quantile_is_smaller(fast_qmc):
    r = equicorrelated(3, 0.5)
    two = equicoordinate_quantile(0.05, r, 10, Tail.TWO_SIDED_BOX, fast_qmc)
    upper = equicoordinate_quantile(0.05, r, 10, Tail.UPPER_ONE_SIDED, fast_qmc)
    lower = equicoordinate_quantile(0.05, r, 10, Tail.LOWER_ONE_SIDED, fast_qmc)
    assert upper < two
    assert upper == pytest.approx(lower, abs=1e-2)


ORACLE_DIMENSIONS = [1, 2, 5, 10, 42]
ORACLE_DF = [3, 10, 50, None]


def random_oracle_instance(rng, q):
    a = rng.normal(size=(q, q + 1))
    r = CorrelationMatrix.from_array(a @ a.T)
    # wider boxes in higher dimension keep the probability away from 0
    offset = math.log(q)
    lower = -(offset + rng.uniform(0.5, 3.0, size=q))
    upper = offset + rng.uniform(0.5, 3.0, size=q)
    lower[rng.random(q) < 0.2] = -np.inf
    return r, lower, upper


@pytest.mark.slow
def test_random_instances_match_monte_carlo():
    rng = np.random.default_rng(2021)
    cfg = QmcConfig(sample_budget=50_000, randomizations=10, seed=3, target_abs_error=2e-4)
    misses = []
    for instance in range(25):
        q = ORACLE_DIMENSIONS[instance % 5]
        df = ORACLE_DF[(instance // 5) % 4]
        r, lower, upper = random_oracle_instance(rng, q)

        qmc = mvt_rectangle_probability(lower, upper, r, df, cfg)
        mc = mc_rectangle_probability(lower, upper, r, df, n_samples=1_000_000, seed=instance)
        if abs(qmc.value - mc.value) > 3.0 * math.hypot(qmc.error, mc.error):
            misses.append((instance, q, df, qmc.value, mc.value))
    assert len(misses) <= 1, misses


@pytest.fixture(scope="module")
def synthetic_interaction_correlation(synthetic):
    fit = fit_cell_means(synthetic)
    c = kronecker_interaction(grand_mean_matrix(synthetic.lab_factor), williams_matrix(synthetic.dose_factor))
    return correlation_from_contrasts(c, covariance(fit, CovarianceKind.HC3)), fit.df_resid


@pytest.mark.slow
@pytest.mark.parametrize("alpha", [0.05, 0.10])
@pytest.mark.parametrize("q", [1, 7, 42])
def test_quantile_round_trip(q, alpha, synthetic_interaction_correlation):
    if q == 42:
        r, df = synthetic_interaction_correlation
    elif q == 7:
        r, df = interaction_correlation(7, 1), 20
    else:
        r, df = CorrelationMatrix.identity(1), 20
    assert r.q == q

    cfg = QmcConfig(sample_budget=50_000, randomizations=10, seed=20210, target_abs_error=2e-4)
    t_star = equicoordinate_quantile(alpha, r, df, cfg=cfg)
    p = mvt_rectangle_probability(*box_for(t_star, q, Tail.TWO_SIDED_BOX), r, df, cfg)
    assert p.value == pytest.approx(1.0 - alpha, abs=2e-3)
    assert stats.t.isf(alpha / 2, df) - 1e-9 <= t_star <= stats.t.isf(alpha / (2 * q), df) + 1e-9
