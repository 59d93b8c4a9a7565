import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from longicausal.effects import EffectGrid, FitReport, decay_coefficients, grid_index, param_label
from longicausal.errors import DimensionMismatch, IncompleteGrid, MissingOutcomeBlock
from longicausal.numkit import fd_jacobian


def test_grid_index_order():
    assert grid_index(3) == [(1, 1), (2, 1), (2, 2), (3, 1), (3, 2), (3, 3)]
    assert param_label(3, 1) == "beta_3(1)"


def test_grid_rejects_holes():
    v = np.full((2, 2), np.nan)
    v[0, 0] = 1.0
    with pytest.raises(IncompleteGrid):
        EffectGrid(v)
    with pytest.raises(IncompleteGrid):
        EffectGrid.from_vector([1.0, 2.0], K=2)


def test_grid_indexing():
    grid = EffectGrid.from_vector([1, 2, 3, 4, 5, 6])
    assert grid[3, 2] == 5
    with pytest.raises(KeyError):
        grid[1, 2]


def test_decay_grid_uses_time_gaps():
    grid = EffectGrid.from_decay(-1.0, 0.5, [0.0, 1.0, 3.0])
    np.testing.assert_allclose(grid.outcome_block(3), [-0.125, -0.25, -1.0])
    np.testing.assert_allclose(decay_coefficients(-1.0, 0.5, [0.0, 1.0, 3.0], 2), [-0.5, -1.0])


def test_alpha_one_flattens_grid():
    grid = EffectGrid.from_decay(-1.3, 1.0, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(grid.as_vector(), np.full(6, -1.3))


def _decay_report(beta=-1.1, alpha=0.9):
    cov = np.array([[0.01, 0.002], [0.002, 0.004]])
    return FitReport("iv", "decay", [beta, alpha], ["beta", "alpha"], cov, K=3, times=np.arange(1.0, 4.0))


def test_decay_block_delta_method():
    rep = _decay_report()
    coef, cov = rep.outcome_block(3)
    J = fd_jacobian(lambda th: decay_coefficients(th[0], th[1], rep.times, 3), rep.params)
    np.testing.assert_allclose(cov, J @ rep.cov_sandwich @ J.T, atol=1e-9)
    np.testing.assert_allclose(coef, [-1.1 * 0.81, -1.1 * 0.9, -1.1])


def test_missing_block():
    rep = FitReport("gest-basic", "saturated", [1.0], ["beta_1(1)"], [[1.0]], blocks={1: [0]}, K=1)
    with pytest.raises(MissingOutcomeBlock):
        rep.outcome_block(2)


def test_shape_checks():
    with pytest.raises(DimensionMismatch):
        FitReport("x", "saturated", [1.0, 2.0], ["a", "b"], np.eye(3))


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_json_round_trip(values):
    cov = np.diag(np.abs(values) + 0.1)
    rep = FitReport(
        "gest-efficient", "saturated", values, ["beta_1(1)", "beta_2(1)", "beta_2(2)"], cov, cov_naive=cov / 2,
        blocks={1: [0], 2: [1, 2]}, n=10, K=2, times=[1.0, 2.0], info={"ridge": False},
    )
    back = FitReport.from_json(rep.to_json())
    np.testing.assert_array_equal(back.params, rep.params)
    np.testing.assert_array_equal(back.cov_naive, rep.cov_naive)
    assert back.blocks == rep.blocks and back.info == rep.info
    np.testing.assert_array_equal(back.effect_vector(), rep.effect_vector())


def test_coefficient_table():
    table = _decay_report().coefficient_table()
    assert list(table["param"]) == ["beta", "alpha"]
    assert table["se_naive"].isna().all()
