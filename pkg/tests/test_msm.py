import numpy as np
import pytest

from longicausal.errors import BadTimeIndex, DimensionMismatch, MissingColumn
from longicausal.msm import fit_msm, fit_msm_all, fit_msm_decay, msm_design
from longicausal.numkit import wls_fit
from longicausal.panel import PanelData
from longicausal.weights import WeightSet, fit_weights_balanced

from conftest import small_panel


def unit_weights(n, K):
    return WeightSet(W=np.ones((n, K)), w_step=np.ones((n, K)), method="unit")


def decay_panel(beta, alpha, n=300, K=3, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, K))
    times = np.arange(1.0, K + 1)
    Y = np.column_stack(
        [0.5 + A[:, :k] @ (beta * alpha ** (times[k - 1] - times[:k])) + noise * rng.normal(size=n) for k in range(1, K + 1)]
    )
    return PanelData(A=A, Y=Y, t=np.tile(times, (n, 1)), L0=np.empty((n, 0)))


def test_unit_weights_k1_is_ols_slope():
    rng = np.random.default_rng(3)
    a = rng.normal(size=200)
    y = 2.0 - 0.7 * a + rng.normal(size=200)
    panel = PanelData(A=a[:, None], Y=y[:, None], t=np.ones((200, 1)), L0=np.empty((200, 0)))
    rep = fit_msm(panel, unit_weights(200, 1), 1)
    assert rep.params[1] == pytest.approx(np.cov(a, y)[0, 1] / np.var(a, ddof=1), abs=1e-10)


def test_unit_weights_equal_plain_ols(panel1b):
    rep = fit_msm(panel1b, unit_weights(panel1b.n, 3), 3)
    X = np.column_stack([np.ones(panel1b.n), panel1b.A])
    coef, *_ = np.linalg.lstsq(X, panel1b.Y[:, 2], rcond=None)
    np.testing.assert_allclose(rep.params, coef, atol=1e-10)


def test_sandwich_matches_hand_formula(panel1b):
    _, ws = fit_weights_balanced(panel1b)
    rep = fit_msm(panel1b, ws, 2)
    X = np.column_stack([np.ones(panel1b.n), panel1b.A[:, :2]])
    w = ws.W[:, 1]
    y = panel1b.Y[:, 1]
    bread = np.linalg.inv(X.T @ (w[:, None] * X))
    e = y - X @ rep.params
    meat = (X * (w * e)[:, None]).T @ (X * (w * e)[:, None])
    n, q = X.shape
    np.testing.assert_allclose(rep.cov_sandwich, bread @ meat @ bread * n / (n - q), rtol=1e-9)
    naive = np.sum(w * e**2) / (n - q) * bread
    np.testing.assert_allclose(rep.cov_naive, naive, rtol=1e-9)


def test_design_columns(panel1b):
    X, names = msm_design(panel1b, 2, ("F1", "V2"))
    assert names == ["eta_0", "beta_2(1)", "beta_2(2)", "adj:F1", "adj:V2"]
    np.testing.assert_array_equal(X[:, 4], panel1b.V[:, 1])
    with pytest.raises(MissingColumn):
        msm_design(panel1b, 2, ("nope",))
    with pytest.raises(BadTimeIndex):
        msm_design(panel1b, 4)


def test_stacked_fit_blocks(panel1b):
    rep = fit_msm_all(panel1b, unit_weights(panel1b.n, 3), extra_adjust=[(), ("F1",), ()])
    assert rep.names[:4] == ["Y1:eta_0", "beta_1(1)", "Y2:eta_0", "beta_2(1)"]
    assert "Y2:adj:F1" in rep.names
    assert rep.blocks == {1: [1], 2: [3, 4], 3: [7, 8, 9]}
    assert rep.cov_sandwich[1, 3] == 0.0
    single = fit_msm(panel1b, unit_weights(panel1b.n, 3), 3)
    np.testing.assert_allclose(rep.outcome_block(3)[0], single.params[1:4], atol=1e-12)


def test_weight_shape_checked(panel1b):
    with pytest.raises(DimensionMismatch):
        fit_msm(panel1b, unit_weights(10, 3), 1)


class TestDecay:
    def test_noise_free_recovery(self):
        panel = decay_panel(-1.1, 0.8)
        rep = fit_msm_decay(panel, unit_weights(panel.n, 3))
        np.testing.assert_allclose(rep.decay_params(), (-1.1, 0.8), atol=1e-4)

    def test_alpha_one_flat_saturated(self):
        panel = decay_panel(-0.7, 1.0)
        rep = fit_msm_all(panel, unit_weights(panel.n, 3))
        np.testing.assert_allclose(rep.effect_vector(), np.full(6, -0.7), atol=1e-10)

    def test_design1b_against_log_linear_oracle(self):
        panel = small_panel("design1b", n=5000, seed=31)
        _, ws = fit_weights_balanced(panel)
        sat = fit_msm_all(panel, ws).grid()
        lags, logs = [], []
        for k in range(1, 4):
            for j in range(1, k + 1):
                lags.append(k - j)
                logs.append(np.log(-sat[k, j]))
        slope, icpt = np.polyfit(lags, logs, 1)
        oracle = (-np.exp(icpt), np.exp(slope))
        rep = fit_msm_decay(panel, ws)
        beta, alpha = rep.decay_params()
        assert beta == pytest.approx(oracle[0], abs=0.03) and alpha == pytest.approx(oracle[1], abs=0.03)
        assert beta == pytest.approx(-1.1, abs=0.06) and alpha == pytest.approx(0.95, abs=0.04)
        assert np.all(rep.se_sandwich[:2] > 0)
