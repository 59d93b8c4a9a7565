"""Marginal structural models fitted by inverse-probability-weighted least squares.

The outcome ``Y_k`` is regressed on ``(1, A_1, ..., A_k)`` with the
cumulative weights ``W_k``. Standard errors come in two flavours: the
classical weighted-regression covariance, which treats the weights as
fixed frequency weights, and the HC1 sandwich of the weighted estimating
equations ``W_k x (Y_k - x'eta)``.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import scipy.linalg as sla

from .effects import FitReport, decay_coefficients, param_label
from .errors import BadTimeIndex, DimensionMismatch, MissingColumn
from .numkit import gmm_sandwich, minimize_simplex, symmetrize, wls_fit
from .panel import PanelData
from .weights import WeightSet


def _extra_column(panel: PanelData, name: str) -> np.ndarray:
    if name in panel.L0_names:
        return panel.L0[:, panel.L0_names.index(name)]
    prefix, digits = name[:1], name[1:]
    if digits.isdigit() and 1 <= int(digits) <= panel.K:
        source = {"A": panel.A, "Y": panel.Y, "V": panel.V, "t": panel.t}.get(prefix)
        if source is not None:
            return source[:, int(digits) - 1]
    raise MissingColumn(name)


def msm_design(panel: PanelData, k: int, extra_adjust: Sequence[str] = ()) -> tuple[np.ndarray, list[str]]:
    """Columns ``const, A1..Ak`` followed by any extra adjustment columns."""
    if not 1 <= k <= panel.K:
        raise BadTimeIndex(f"outcome index {k} outside 1..{panel.K}")
    cols = [np.ones(panel.n)] + [panel.A[:, j] for j in range(k)]
    names = ["eta_0"] + [param_label(k, j) for j in range(1, k + 1)]
    for name in extra_adjust:
        cols.append(_extra_column(panel, name))
        names.append(f"adj:{name}")
    return np.column_stack(cols), names


def _hc1(X: np.ndarray, resid: np.ndarray, w: np.ndarray, XtWX_inv: np.ndarray) -> np.ndarray:
    """HC1 sandwich for WLS with moment ``w x e`` and Jacobian ``-X'WX / n``."""
    n, q = X.shape
    score = X * (w * resid)[:, None]
    meat = score.T @ score * n / (n - q)
    return symmetrize(XtWX_inv @ meat @ XtWX_inv)


def fit_msm(panel: PanelData, ws: WeightSet, k: int, extra_adjust: Iterable[str] = ()) -> FitReport:
    """Weighted least squares of ``Y_k`` on the exposure history up to ``k``."""
    extra_adjust = tuple(extra_adjust)
    if ws.n != panel.n or ws.K < k:
        raise DimensionMismatch("weights do not match the panel")
    X, names = msm_design(panel, k, extra_adjust)
    w = ws.W[:, k - 1]
    fit = wls_fit(X, panel.Y[:, k - 1], w, names)
    return FitReport(
        estimator="iptw",
        structure="saturated",
        params=fit.coef,
        names=names,
        cov_sandwich=_hc1(X, fit.residuals, w, fit.XtWX_inv),
        cov_naive=fit.cov_classical,
        blocks={k: list(range(1, k + 1))},
        n=panel.n,
        K=k,
        times=panel.common_times,
        info={"weights": ws.method, "extra_adjust": list(extra_adjust), "truncation": ws.truncation},
    )


def fit_msm_all(panel: PanelData, ws: WeightSet, extra_adjust: Sequence[Sequence[str]] | None = None) -> FitReport:
    """Every outcome fitted separately, stacked with a block-diagonal covariance.

    Cross-outcome covariances are set to zero; contrasts for one outcome use
    only that outcome's block.
    """
    fits = []
    for k in range(1, panel.K + 1):
        extra = () if extra_adjust is None else tuple(extra_adjust[k - 1])
        fits.append(fit_msm(panel, ws, k, extra))
    params, names, blocks = [], [], {}
    offset = 0
    for k, f in enumerate(fits, start=1):
        params.append(f.params)
        names += [f"Y{k}:{nm}" if nm.startswith(("eta_0", "adj:")) else nm for nm in f.names]
        blocks[k] = [offset + i for i in f.blocks[k]]
        offset += f.params.size
    return FitReport(
        estimator="iptw",
        structure="saturated",
        params=np.concatenate(params),
        names=names,
        cov_sandwich=sla.block_diag(*[f.cov_sandwich for f in fits]),
        cov_naive=sla.block_diag(*[f.cov_naive for f in fits]),
        blocks=blocks,
        n=panel.n,
        K=panel.K,
        times=panel.common_times,
        info={"weights": ws.method, "truncation": ws.truncation},
    )


def fit_msm_decay(panel: PanelData, ws: WeightSet, k: int | None = None) -> FitReport:
    """Weighted least squares with ``eta_k(j) = beta alpha^(t_k - t_j)``.

    With ``k=None`` all outcomes share ``(beta, alpha)`` and each keeps its
    own intercept; otherwise only ``Y_k`` is used. Intercepts are profiled
    out of the simplex search and re-enter the sandwich as parameters.
    """
    times = panel.common_times
    if times is None:
        raise DimensionMismatch("decay-structured fits need a time grid shared by all rows")
    outcomes = list(range(1, panel.K + 1)) if k is None else [k]
    W = ws.W
    Y, A = panel.Y, panel.A

    def linear_part(theta, kk):
        return A[:, :kk] @ decay_coefficients(theta[0], theta[1], times, kk)

    def intercepts(theta):
        return np.array(
            [np.average(Y[:, kk - 1] - linear_part(theta, kk), weights=W[:, kk - 1]) for kk in outcomes]
        )

    def loss(theta):
        total = 0.0
        for c, kk in enumerate(outcomes):
            e = Y[:, kk - 1] - linear_part(theta, kk)
            e = e - np.average(e, weights=W[:, kk - 1])
            total += float(np.sum(W[:, kk - 1] * e * e))
        return total / panel.n

    k_first = outcomes[0]
    start_beta = wls_fit(msm_design(panel, k_first)[0], Y[:, k_first - 1], W[:, k_first - 1]).coef[k_first]
    starts = [np.array([start_beta, a]) for a in (0.3, 0.6, 0.9)]
    best = min((minimize_simplex(loss, x0, restarts=2) for x0 in starts), key=lambda r: r.fun)
    theta = best.x
    full = np.concatenate([theta, intercepts(theta)])

    def per_unit(par):
        beta, alpha, icpt = par[0], par[1], par[2:]
        cols = []
        d_beta = np.zeros(panel.n)
        d_alpha = np.zeros(panel.n)
        for c, kk in enumerate(outcomes):
            lags = times[kk - 1] - times[:kk]
            base = np.power(alpha, lags)
            with np.errstate(divide="ignore", invalid="ignore"):
                dpow = np.where(lags == 0, 0.0, lags * np.power(alpha, lags - 1))
            e = Y[:, kk - 1] - icpt[c] - A[:, :kk] @ (beta * base)
            we = W[:, kk - 1] * e
            d_beta += we * (A[:, :kk] @ base)
            d_alpha += we * (A[:, :kk] @ (beta * dpow))
            cols.append(we)
        return np.column_stack([d_beta, d_alpha] + cols)

    sand = gmm_sandwich(per_unit, full)
    names = ["beta", "alpha"] + [f"Y{kk}:eta_0" for kk in outcomes]
    return FitReport(
        estimator="iptw",
        structure="decay",
        params=full,
        names=names,
        cov_sandwich=sand.cov,
        n=panel.n,
        K=panel.K if k is None else k,
        times=times,
        info={"weights": ws.method, "converged": best.converged, "objective": best.fun, "outcomes": outcomes},
    )
