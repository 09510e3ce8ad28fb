import numpy as np
import pytest

from app.contrasts import (
    dunnett_matrix,
    from_json_dict,
    grand_mean_matrix,
    halving_series,
    highest_dose_matrix,
    kronecker_interaction,
    make_dose_factor,
    make_lab_factor,
    to_json_dict,
    to_text,
    user_matrix,
    validate,
    williams_matrix,
)
from app.errors import ContrastError
from app.models import CellOrder, ContrastKind, ContrastMatrix, FactorLevels

FIRST_TABLE_ROW = "((1 - 2,3,4,5,6,7):0.5) - ((1 - 2,3,4,5,6,7):0)"
LAST_TABLE_ROW = "((7 - 1,2,3,4,5,6):0.015625,0.03125,0.0625,0.125,0.25,0.5) - ((7 - 1,2,3,4,5,6):0)"


def test_williams_three_doses_balanced():
    c = williams_matrix(make_dose_factor(3))
    expected = np.array([
        [-1, 0, 0, 1],
        [-1, 0, 1 / 2, 1 / 2],
        [-1, 1 / 3, 1 / 3, 1 / 3],
    ])
    assert c.kind == ContrastKind.WILLIAMS
    np.testing.assert_allclose(c.rows, expected, rtol=0, atol=1e-15)


def test_williams_single_dose_is_two_sample_contrast():
    c = williams_matrix(make_dose_factor(1))
    np.testing.assert_array_equal(c.rows, [[-1.0, 1.0]])


def test_williams_weights_follow_replicate_counts():
    c = williams_matrix(make_dose_factor(2, sizes=[4, 2, 6]))
    np.testing.assert_allclose(c.rows[1], [-1.0, 0.25, 0.75])


def test_williams_labels_pool_top_doses():
    c = williams_matrix(make_dose_factor(6))
    assert c.row_labels[0] == "0.5 - 0"
    assert c.row_labels[-1] == "0.015625,0.03125,0.0625,0.125,0.25,0.5 - 0"


def test_grand_mean_four_labs_balanced():
    c = grand_mean_matrix(make_lab_factor(4))
    third = 1 / 3
    expected = np.array([
        [-1, third, third, third],
        [third, -1, third, third],
        [third, third, -1, third],
        [third, third, third, -1],
    ])
    np.testing.assert_allclose(c.rows, expected, rtol=0, atol=1e-15)
    assert c.row_labels[0] == "1 - 2,3,4"
    assert c.row_labels[3] == "4 - 1,2,3"


def test_highest_dose_and_dunnett():
    dose = make_dose_factor(3)
    np.testing.assert_array_equal(highest_dose_matrix(dose).rows, [[-1, 0, 0, 1]])
    d = dunnett_matrix(dose)
    np.testing.assert_array_equal(d.rows, [[-1, 1, 0, 0], [-1, 0, 1, 0], [-1, 0, 0, 1]])
    assert d.row_labels[0] == f"{dose.levels[1]} - 0"


def test_dose_contrasts_need_a_control():
    lab = make_lab_factor(3)
    with pytest.raises(ContrastError):
        williams_matrix(lab)


def test_factor_levels_reject_bad_designs():
    with pytest.raises(ValueError):
        FactorLevels(name="dose", levels=["0"], sizes=[3], control="0")
    with pytest.raises(ValueError):
        FactorLevels(name="lab", levels=["a", "b"], sizes=[3, 0])
    with pytest.raises(ValueError):
        FactorLevels(name="lab", levels=["a", "a"], sizes=[3, 3])


def test_interaction_table_labels():
    c = kronecker_interaction(grand_mean_matrix(make_lab_factor(7)), williams_matrix(make_dose_factor(6)))
    assert c.q == 42
    assert c.m == 49
    assert c.row_labels[0] == FIRST_TABLE_ROW
    assert c.row_labels[-1] == LAST_TABLE_ROW
    assert c.row_groups[:6] == ["1"] * 6
    assert c.row_groups[-1] == "7"
    assert validate(c) == []


def test_interaction_rows_annihilate_main_effects():
    rng = np.random.default_rng(3)
    c = kronecker_interaction(grand_mean_matrix(make_lab_factor(4)), williams_matrix(make_dose_factor(3)))
    lab_effect = rng.normal(size=4)
    dose_effect = rng.normal(size=4)
    additive = (lab_effect[:, None] + dose_effect[None, :]).reshape(-1)
    np.testing.assert_allclose(c.rows @ additive, 0.0, atol=1e-12)
    np.testing.assert_allclose(c.rows.sum(axis=1), 0.0, atol=1e-12)


def test_dose_major_order_permutes_columns():
    c_lab = grand_mean_matrix(make_lab_factor(3))
    c_dose = williams_matrix(make_dose_factor(2))
    lab_major = kronecker_interaction(c_lab, c_dose)
    dose_major = kronecker_interaction(c_lab, c_dose, order=CellOrder.DOSE_MAJOR)
    # dose-major column t * 3 + i holds lab-major column i * 3 + t
    perm = [i * 3 + t for t in range(3) for i in range(3)]
    np.testing.assert_array_equal(dose_major.rows, lab_major.rows[:, perm])
    assert dose_major.column_labels[1] == "2:0"


def test_validate_reports_violations():
    bad = ContrastMatrix(
        kind=ContrastKind.USER_DEFINED,
        rows=[[1.0, 1.0], [0.0, 0.0]],
        row_labels=["a", "b"],
        column_labels=["x", "y"],
    )
    problems = validate(bad)
    assert any(p.startswith("row 1: sum") for p in problems)
    assert "row 2: all weights zero" in problems


def test_user_matrix_is_validated():
    c = user_matrix([[1, -1, 0]], ["a - b"], ["a", "b", "c"])
    assert c.kind == ContrastKind.USER_DEFINED
    with pytest.raises(ContrastError):
        user_matrix([[1, 1, 0]], ["bad"], ["a", "b", "c"])
    with pytest.raises(ContrastError):
        user_matrix([[1, -1]], ["a - b", "extra"], ["a", "b"])


def test_json_and_text_rendering():
    c = williams_matrix(make_dose_factor(3))
    restored = from_json_dict(to_json_dict(c))
    np.testing.assert_array_equal(restored.rows, c.rows)
    assert restored.row_labels == c.row_labels

    text = to_text(c)
    assert "1/3" in text
    assert "1/2" in text


def test_from_json_rejects_malformed_payload():
    with pytest.raises(ContrastError):
        from_json_dict({"kind": "Williams", "rows": [[1, -1]]})


def test_halving_series():
    assert halving_series(6) == [0.0, 0.015625, 0.03125, 0.0625, 0.125, 0.25, 0.5]
    assert make_dose_factor(6).levels == ["0", "0.015625", "0.03125", "0.0625", "0.125", "0.25", "0.5"]


def test_single_lab_factor_has_no_lab_contrast():
    lab = FactorLevels(name="lab", levels=["a"], sizes=[4])
    assert lab.n_levels == 1
    with pytest.raises(ContrastError, match="at least 2"):
        grand_mean_matrix(lab)
