import numpy as np
import pandas as pd
import pytest
from scipy import stats

from app.cell_means import (
    cell_summary,
    covariance,
    fit_cell_means,
    interaction_f_test,
    sandwich_reference,
)
from app.contrasts import grand_mean_matrix, kronecker_interaction, williams_matrix
from app.data_service import dataset_from_frame
from app.errors import DataError, DegenerateDataError
from app.models import CovarianceKind


@pytest.fixture
def pairs(cells_dataset):
    # every cell holds residuals -1, +1
    return cells_dataset({("A", 0): [1, 3], ("A", 1): [2, 4], ("B", 0): [1, 3], ("B", 1): [2, 4]})


def random_dataset(rng, labs=3, doses=3, min_n=2, max_n=5, scale=1.0):
    rows = []
    for lab in range(labs):
        for dose in range(doses):
            n = int(rng.integers(min_n, max_n + 1))
            sd = scale * rng.uniform(0.5, 2.0)
            for v in rng.normal(lab + dose, sd, size=n):
                rows.append({"lab": f"L{lab}", "dose": float(dose), "response": v, "source_row": len(rows) + 2})
    return dataset_from_frame(pd.DataFrame(rows))


def test_fit_hand_example(pairs):
    fit = fit_cell_means(pairs)
    np.testing.assert_allclose(fit.cell_means, [2, 3, 2, 3])
    assert fit.rss == pytest.approx(8.0)
    assert fit.df_resid == 4
    assert fit.pooled_variance == pytest.approx(2.0)
    assert not fit.degenerate


def test_cell_means_match_streaming_oracle():
    rng = np.random.default_rng(1)
    d = random_dataset(rng, scale=1e3)
    fit = fit_cell_means(d)

    totals, counts = {}, {}
    for cell, y in zip(d.cell_index, d.responses):
        totals[cell] = totals.get(cell, 0.0) + y
        counts[cell] = counts.get(cell, 0) + 1
    oracle = np.array([totals[c] / counts[c] for c in range(d.n_cells)])
    np.testing.assert_allclose(fit.cell_means, oracle, rtol=1e-10)

    within = np.bincount(d.cell_index, weights=fit.residuals, minlength=d.n_cells)
    np.testing.assert_allclose(within, 0.0, atol=1e-9)


def test_constant_responses_are_degenerate(cells_dataset):
    d = cells_dataset({("A", 0): [5, 5], ("A", 1): [5, 5], ("B", 0): [5, 5], ("B", 1): [5, 5]})
    fit = fit_cell_means(d)
    assert fit.degenerate
    assert fit.pooled_variance == 0.0


def test_large_offset_does_not_make_data_degenerate(small_dataset, cells_dataset):
    shifted = small_dataset.with_responses(small_dataset.responses + 1e9)
    fit = fit_cell_means(shifted)
    assert not fit.degenerate
    assert fit.pooled_variance == pytest.approx(fit_cell_means(small_dataset).pooled_variance, rel=1e-6)

    flat = cells_dataset({("A", 0): [1e9 + 1] * 2, ("A", 1): [1e9 + 2] * 2, ("B", 0): [1e9 + 3] * 2, ("B", 1): [1e9 + 4] * 2})
    assert fit_cell_means(flat).degenerate


def test_one_observation_per_cell_has_no_df(cells_dataset):
    d = cells_dataset({("A", 0): [1], ("A", 1): [2], ("B", 0): [3], ("B", 1): [4]})
    with pytest.raises(DegenerateDataError, match="df_resid"):
        fit_cell_means(d)


def test_covariance_per_cell_formulas(pairs):
    fit = fit_cell_means(pairs)
    np.testing.assert_allclose(np.diag(covariance(fit, CovarianceKind.CLASSICAL).matrix), 1.0)
    np.testing.assert_allclose(np.diag(covariance(fit, CovarianceKind.HC0).matrix), 0.5)
    # HC1 scales HC0 by N / (N - K) = 8 / 4
    np.testing.assert_allclose(np.diag(covariance(fit, CovarianceKind.HC1).matrix), 1.0)
    np.testing.assert_allclose(np.diag(covariance(fit, CovarianceKind.HC3).matrix), 2.0)

    est = covariance(fit, CovarianceKind.HC3)
    assert est.df == 4
    np.testing.assert_array_equal(est.matrix, est.matrix.T)


def test_hc3_rejects_singleton_cells(cells_dataset):
    d = cells_dataset({("A", 0): [1, 3], ("A", 1): [2], ("B", 0): [1, 3], ("B", 1): [2, 4]})
    fit = fit_cell_means(d)
    with pytest.raises(DataError, match="singleton"):
        covariance(fit, CovarianceKind.HC3)
    covariance(fit, CovarianceKind.HC0)


@pytest.mark.parametrize("kind", [CovarianceKind.CLASSICAL, CovarianceKind.HC0, CovarianceKind.HC1, CovarianceKind.HC3])
def test_per_cell_shortcut_matches_matrix_sandwich(kind):
    rng = np.random.default_rng(42)
    for _ in range(50):
        d = random_dataset(rng, labs=int(rng.integers(2, 4)), doses=int(rng.integers(2, 4)))
        fit = fit_cell_means(d)
        shortcut = covariance(fit, kind).matrix
        reference = sandwich_reference(fit, kind)
        np.testing.assert_allclose(shortcut, reference, rtol=1e-9, atol=1e-14)


def test_classical_contrast_variance_is_textbook_denominator():
    rng = np.random.default_rng(8)
    d = random_dataset(rng)
    fit = fit_cell_means(d)
    c = kronecker_interaction(grand_mean_matrix(d.lab_factor), williams_matrix(d.dose_factor))
    var = np.diag(c.rows @ covariance(fit, CovarianceKind.CLASSICAL).matrix @ c.rows.T)
    expected = fit.pooled_variance * (c.rows ** 2 / fit.cell_sizes).sum(axis=1)
    np.testing.assert_allclose(var, expected, rtol=1e-12)


def test_hc0_approaches_classical_for_large_cells():
    rng = np.random.default_rng(4)
    rows = []
    for lab in ("A", "B"):
        for dose in (0.0, 1.0):
            for v in rng.normal(0.0, 1.0, size=200):
                rows.append({"lab": lab, "dose": dose, "response": v, "source_row": len(rows) + 2})
    fit = fit_cell_means(dataset_from_frame(pd.DataFrame(rows)))
    hc0 = np.diag(covariance(fit, CovarianceKind.HC0).matrix)
    classical = np.diag(covariance(fit, CovarianceKind.CLASSICAL).matrix)
    # pooled over cells the two differ only by the factor (N - K) / N
    assert hc0.mean() == pytest.approx(classical.mean() * (fit.df_resid / fit.n_obs), rel=1e-12)
    np.testing.assert_allclose(hc0, classical, rtol=0.4)


def test_f_test_hand_computed_two_by_two(cells_dataset):
    # interaction deviations +-0.5, SS_int = 2 on 1 df, MSE = 2 on 4 df
    d = cells_dataset({("A", 0): [1, 3], ("A", 1): [4, 6], ("B", 0): [2, 4], ("B", 1): [3, 5]})
    f = interaction_f_test(d)
    assert f.df1 == 1
    assert f.df2 == 4
    assert f.F == pytest.approx(1.0, abs=1e-8)
    assert f.p == pytest.approx(stats.f.sf(1.0, 1, 4), abs=1e-12)


def test_f_test_near_zero_without_interaction(cells_dataset):
    labs = {"A": 0.0, "B": 2.0, "C": -1.0}
    doses = {0.0: 0.0, 1.0: 1.5, 2.0: 3.0}
    cells = {(lab, dose): [a + b + 5 - 0.3, a + b + 5 + 0.3] for lab, a in labs.items() for dose, b in doses.items()}
    f = interaction_f_test(cells_dataset(cells))
    assert f.F < 1e-10
    assert f.p > 0.999


def test_f_test_invariant_to_main_effects():
    rng = np.random.default_rng(12)
    for _ in range(20):
        d = random_dataset(rng)
        base = interaction_f_test(d)
        lab_shift = rng.normal(0, 3, size=d.n_labs)[d.lab_index]
        dose_shift = rng.normal(0, 3, size=d.n_doses)[d.dose_index]
        shifted = interaction_f_test(d.with_responses(d.responses + lab_shift + dose_shift))
        assert shifted.F == pytest.approx(base.F, rel=1e-9, abs=1e-12)


def test_f_grows_with_interaction(cells_dataset):
    noise = [-0.4, 0.4]
    values = []
    for delta in (0.0, 1.0, 2.0, 4.0):
        d = cells_dataset({
            ("A", 0): noise, ("A", 1): noise, ("B", 0): noise,
            ("B", 1): [delta + e for e in (-0.5, 0.3)],
        })
        values.append(interaction_f_test(d).F)
    assert all(b > a for a, b in zip(values, values[1:]))


def test_cell_summary(pairs):
    rows = cell_summary(fit_cell_means(pairs))
    assert rows[0] == {"lab": "A", "dose": "0", "n": 2, "mean": 2.0, "sd": pytest.approx(np.sqrt(2.0))}
