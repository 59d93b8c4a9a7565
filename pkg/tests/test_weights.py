import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm, spearmanr

from longicausal.errors import BalanceNotReachedWarning, NonPositiveWeights
from longicausal.panel import PanelData
from longicausal.weights import (
    WeightSet,
    balance_table,
    effective_sample_size,
    fit_weights,
    fit_weights_balanced,
    fit_weights_gaussian,
    flagged_covariates,
    top_share,
    weight_diagnostics,
    weighted_midranks,
    weighted_pearson,
    weighted_spearman,
)

from conftest import small_panel


def k1_panel(A, L0=None, names=()):
    A = np.asarray(A, dtype=float)
    n = A.size
    L0 = np.empty((n, 0)) if L0 is None else np.asarray(L0, dtype=float).reshape(n, -1)
    return PanelData(A=A[:, None], Y=np.zeros((n, 1)), t=np.ones((n, 1)), L0=L0, L0_names=names)


def confounded_k1(n=400, seed=0, rho=0.5):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    a = rho * x + np.sqrt(1 - rho**2) * rng.normal(size=n)
    return k1_panel(a, x, ("x",))


class TestGaussian:
    def test_independent_exposure_gives_unit_weights(self):
        panel = k1_panel(np.random.default_rng(1).normal(size=50))
        _, ws = fit_weights_gaussian(panel)
        np.testing.assert_allclose(ws.W, 1.0, atol=1e-12)

    def test_six_row_hand_oracle(self):
        a = np.array([0.3, -1.2, 0.8, 2.1, 0.0, -0.4])
        x = np.array([0.1, -0.9, 0.4, 1.5, 0.3, -0.2])
        X = np.column_stack([np.ones(6), x])
        coef, *_ = np.linalg.lstsq(X, a, rcond=None)
        e = a - X @ coef
        s_den = np.sqrt(e @ e / 4)
        oracle = norm.pdf(a, a.mean(), a.std(ddof=1)) / norm.pdf(a, X @ coef, s_den)
        _, ws = fit_weights_gaussian(k1_panel(a, x, ("x",)))
        np.testing.assert_allclose(ws.W[:, 0], oracle, rtol=1e-10)

    def test_cumulative_product(self, panel1b):
        _, ws = fit_weights_gaussian(panel1b)
        np.testing.assert_allclose(ws.W, np.cumprod(ws.w_step, axis=1), rtol=1e-12)

    def test_mean_weight_near_one(self):
        _, ws = fit_weights_gaussian(small_panel("design1b", n=5000, seed=4))
        assert np.all(np.abs(ws.W.mean(axis=0) - 1.0) <= 0.05)

    def test_truncation_clips_cumulative_only(self, panel1b):
        _, raw = fit_weights_gaussian(panel1b)
        _, cut = fit_weights_gaussian(panel1b, truncation=(1.0, 99.0))
        np.testing.assert_array_equal(cut.w_step, raw.w_step)
        for k in range(3):
            lo, hi = np.percentile(raw.W[:, k], [1.0, 99.0])
            assert cut.W[:, k].min() >= lo - 1e-12 and cut.W[:, k].max() <= hi + 1e-12

    def test_rejects_nonpositive(self):
        with pytest.raises(NonPositiveWeights):
            WeightSet(W=np.array([[1.0], [0.0]]), w_step=np.ones((2, 1)), method="x")


class TestBalanced:
    def test_already_balanced_matches_ml(self):
        panel = k1_panel(np.random.default_rng(2).normal(size=60))
        _, ml = fit_weights_gaussian(panel)
        _, bal = fit_weights_balanced(panel)
        np.testing.assert_allclose(bal.W, ml.W, atol=1e-6)

    def test_confounded_fixture(self):
        panel = confounded_k1()
        x, a = panel.L0[:, 0], panel.A[:, 0]
        assert abs(np.corrcoef(x, a)[0, 1]) > 0.3
        _, ws = fit_weights_balanced(panel)
        assert all(ws.converged)
        assert abs(weighted_pearson(a, x, ws.W[:, 0])) < 1e-6

    def test_infeasible_balance_falls_back_to_ml(self):
        # with the residual SD held at its ML value, no member of the family balances this one
        panel = confounded_k1(rho=0.8)
        _, ml = fit_weights_gaussian(panel)
        with pytest.warns(BalanceNotReachedWarning):
            _, ws = fit_weights_balanced(panel)
        assert ws.converged == (False,)
        np.testing.assert_array_equal(ws.W, ml.W)

    def test_design1a_balance(self):
        panel = small_panel("design1a", n=3000, seed=8)
        _, ws = fit_weights_balanced(panel)
        table = balance_table(panel, ws)
        assert table["pearson"].max() < 1e-6
        assert table["spearman"].max() < 0.1
        assert flagged_covariates(table) == []

    def test_dispatch(self, panel1b):
        assert fit_weights(panel1b, "balanced")[1].method == "balance_exact"
        assert fit_weights(panel1b, "gaussian")[1].method == "gaussian_ml"
        with pytest.raises(ValueError):
            fit_weights(panel1b, "cbps")

    def test_feedback_lowers_ess(self):
        ess = {}
        for preset in ("design1a", "design1b"):
            _, ws = fit_weights_balanced(small_panel(preset, n=5000, seed=12))
            ess[preset] = weight_diagnostics(ws).ess[2]
        assert ess["design1a"] < ess["design1b"] < 5000


class TestDiagnostics:
    def test_ess(self):
        assert effective_sample_size(np.ones(37)) == pytest.approx(37)
        assert effective_sample_size([2.0, 1.0, 1.0]) == pytest.approx(16 / 6)

    def test_top_share_uniform(self):
        assert top_share(np.ones(200)) == pytest.approx(0.01)

    def test_three_element_vectors(self):
        diag = weight_diagnostics(np.array([[2.0, 1.0], [1.0, 1.0], [1.0, 4.0]]))
        np.testing.assert_array_equal(diag.ess, [16 / 6, 36 / 18])
        np.testing.assert_array_equal(diag.share_top1, [0.5, 4 / 6])
        np.testing.assert_allclose(diag.q999, [1.0 + 0.998 * 1.0, 1.0 + 0.998 * 3.0], rtol=0, atol=1e-15)
        np.testing.assert_array_equal(diag.maximum, [2.0, 4.0])

    @given(st.lists(st.floats(0.01, 100), min_size=2, max_size=50))
    def test_ess_bounds(self, w):
        assert 1.0 - 1e-9 <= effective_sample_size(w) <= len(w) + 1e-9


class TestCorrelations:
    def test_unit_weights_equal_unweighted(self, rng):
        x, y = rng.normal(size=80), rng.normal(size=80)
        assert weighted_pearson(x, y, np.ones(80)) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)
        y_tied = np.round(y, 0)
        assert weighted_spearman(x, y_tied, np.ones(80)) == pytest.approx(spearmanr(x, y_tied)[0], abs=1e-12)

    def test_midranks_ties(self):
        np.testing.assert_array_equal(weighted_midranks([3.0, 1.0, 3.0], [1.0, 1.0, 1.0]), [2.0, 0.5, 2.0])

    def test_constant_column_not_applicable(self, rng):
        assert np.isnan(weighted_pearson(rng.normal(size=10), np.full(10, 3.0), np.ones(10)))

    def test_table_unweighted(self, panel1b):
        table = balance_table(panel1b, None)
        row = table[(table.time == 2) & (table.covariate == "A1")].iloc[0]
        assert row.pearson == pytest.approx(abs(np.corrcoef(panel1b.A[:, 1], panel1b.A[:, 0])[0, 1]), abs=1e-12)
        assert set(table.columns) == {"time", "covariate", "pearson", "spearman", "flagged"}
