"""Stabilized inverse-probability weights for a continuous exposure.

At each time ``s`` the per-step weight is the ratio of a marginal normal
density of ``A_s`` to a normal density of ``A_s`` given the history
``H_s``; cumulative weights are running products over time. The
denominator mean model is fitted either by maximum likelihood (OLS) or by
calibrating its coefficients until the weighted exposure is exactly
uncorrelated with every history column.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import BalanceNotReachedWarning, DegenerateSD, NonPositiveWeights, SingularMatrix
from .numkit import fd_jacobian, solve_linear, wls_fit
from .panel import PanelData, history_design

SD_FLOOR = 1e-10
BALANCE_THRESHOLD = 0.1
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class TimeDensity:
    """Density models behind the weight at one time point."""

    columns: tuple[str, ...]
    coef: np.ndarray
    sigma_den: float
    mu_num: float
    sigma_num: float


@dataclass(frozen=True, eq=False)
class DensityModel:
    times: tuple[TimeDensity, ...]
    exclude: tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class WeightSet:
    """Cumulative weights ``W`` (``n x K``) and the per-step ratios behind them.

    Without truncation ``W[:, j] = prod_{s<=j} w_step[:, s]``. Truncation
    clips each column of ``W`` at the requested percentiles and leaves
    ``w_step`` untouched.
    """

    W: np.ndarray
    w_step: np.ndarray
    method: str
    truncation: tuple[float, float] | None = None
    converged: tuple[bool, ...] = ()

    def __post_init__(self):
        if np.any(self.W <= 0) or not np.all(np.isfinite(self.W)):
            raise NonPositiveWeights("weights must be finite and strictly positive")

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def K(self) -> int:
        return self.W.shape[1]


def _log_normal_pdf(x: np.ndarray, mu, sigma: float) -> np.ndarray:
    z = (x - mu) / sigma
    return -0.5 * z * z - math.log(sigma) - _LOG_SQRT_2PI


def _numerator(a: np.ndarray) -> tuple[float, float]:
    mu = float(a.mean())
    sd = float(a.std(ddof=1))
    if sd < SD_FLOOR:
        raise DegenerateSD("exposure has (numerically) zero variance")
    return mu, sd


def _log_step(a, X, coef, sigma_den, mu_num, sigma_num) -> np.ndarray:
    return _log_normal_pdf(a, mu_num, sigma_num) - _log_normal_pdf(a, X @ coef, sigma_den)


def _ml_time(panel: PanelData, s: int, exclude) -> tuple[TimeDensity, np.ndarray, np.ndarray]:
    H = history_design(panel, s, exclude)
    a = panel.A[:, s - 1]
    fit = wls_fit(H.X, a, names=H.columns)
    sigma_den = math.sqrt(fit.sigma2)
    if sigma_den < SD_FLOOR:
        raise DegenerateSD(f"exposure A{s} is a deterministic function of its history")
    mu, sd = _numerator(a)
    td = TimeDensity(H.columns, fit.coef, sigma_den, mu, sd)
    return td, H.X, a


def _assemble(log_steps: Sequence[np.ndarray], method, truncation, converged) -> WeightSet:
    L = np.column_stack(log_steps)
    w_step = np.exp(L)
    W = np.exp(np.cumsum(L, axis=1))
    if truncation is not None:
        lo, hi = truncation
        lo_q = np.percentile(W, lo, axis=0)
        hi_q = np.percentile(W, hi, axis=0)
        W = np.clip(W, lo_q, hi_q)
    return WeightSet(W=W, w_step=w_step, method=method, truncation=truncation, converged=tuple(converged))


def fit_weights_gaussian(
    panel: PanelData, exclude: Iterable[str] = (), truncation: tuple[float, float] | None = None
) -> tuple[DensityModel, WeightSet]:
    """Normal-density ratio weights with an OLS denominator and marginal numerator."""
    exclude = tuple(exclude)
    dens, logs = [], []
    for s in range(1, panel.K + 1):
        td, X, a = _ml_time(panel, s, exclude)
        dens.append(td)
        logs.append(_log_step(a, X, td.coef, td.sigma_den, td.mu_num, td.sigma_num))
    ws = _assemble(logs, "gaussian_ml", truncation, [True] * panel.K)
    return DensityModel(tuple(dens), exclude), ws


# ---------------------------------------------------------------------------
# exact balance


def _balance_moments(a, X, sigma_den, mu, sd):
    """Balance conditions as a function of the denominator mean coefficients.

    Rows: weighted covariance of the standardized exposure with each
    non-intercept history column, then its weighted mean.
    """
    a_std = (a - mu) / sd
    Xc = X[:, 1:] - X[:, 1:].mean(axis=0)
    n = a.size

    def moments(coef):
        logw = np.minimum(_log_step(a, X, coef, sigma_den, mu, sd), 700.0)
        wa = np.exp(logw) * a_std
        return np.append(Xc.T @ wa, wa.sum()) / n

    return moments


def _damped_newton(fun, x0, tol=1e-10, max_iter=100):
    x = np.asarray(x0, dtype=float)
    f = fun(x)
    norm = float(np.max(np.abs(f)))
    for _ in range(max_iter):
        if norm < tol:
            return x, True
        J = fd_jacobian(fun, x)
        try:
            step = solve_linear(J, f)
        except SingularMatrix:
            step = np.linalg.lstsq(J, f, rcond=None)[0]
        lam = 1.0
        while lam > 1e-6:
            x_new = x - lam * step
            f_new = fun(x_new)
            new_norm = float(np.max(np.abs(f_new)))
            if np.isfinite(new_norm) and new_norm < norm:
                break
            lam *= 0.5
        else:
            return x, False
        x, f, norm = x_new, f_new, new_norm
    return x, norm < tol


def fit_weights_balanced(
    panel: PanelData,
    exclude: Iterable[str] = (),
    truncation: tuple[float, float] | None = None,
    tol: float = 1e-10,
) -> tuple[DensityModel, WeightSet]:
    """Weights calibrated so each exposure is exactly balanced on its history.

    At every time the denominator mean coefficients are moved, starting
    from the ML fit and with the residual SD held at its ML value, until the
    weighted standardized exposure has zero mean and zero covariance with
    each history column. A time point where Newton's method fails keeps
    its ML weights and raises :class:`BalanceNotReachedWarning`.
    """
    exclude = tuple(exclude)
    dens, logs, ok = [], [], []
    for s in range(1, panel.K + 1):
        td, X, a = _ml_time(panel, s, exclude)
        moments = _balance_moments(a, X, td.sigma_den, td.mu_num, td.sigma_num)
        x0 = np.array(td.coef)
        with np.errstate(over="ignore", invalid="ignore"):
            x, converged = _damped_newton(moments, x0, tol=tol)
        if not converged:
            warnings.warn(
                f"exact balance not reached at time {s}; using ML weights", BalanceNotReachedWarning, stacklevel=2
            )
            x = x0
        td = TimeDensity(td.columns, x, td.sigma_den, td.mu_num, td.sigma_num)
        dens.append(td)
        logs.append(_log_step(a, X, td.coef, td.sigma_den, td.mu_num, td.sigma_num))
        ok.append(converged)
    ws = _assemble(logs, "balance_exact", truncation, ok)
    return DensityModel(tuple(dens), exclude), ws


def fit_weights(panel: PanelData, method: str = "gaussian", exclude: Iterable[str] = (), truncation=None):
    if method in ("gaussian", "gaussian_ml"):
        return fit_weights_gaussian(panel, exclude, truncation)
    if method in ("balanced", "balance_exact"):
        return fit_weights_balanced(panel, exclude, truncation)
    raise ValueError(f"unknown weight method {method!r}")


# ---------------------------------------------------------------------------
# diagnostics


def effective_sample_size(w) -> float:
    w = np.asarray(w, dtype=float)
    return float(w.sum() ** 2 / np.sum(w * w))


def top_share(w, frac: float = 0.01) -> float:
    """Share of the total weight held by the ``ceil(frac * n)`` largest weights."""
    w = np.asarray(w, dtype=float)
    m = max(1, math.ceil(frac * w.size - 1e-12))
    return float(np.sort(w)[-m:].sum() / w.sum())


@dataclass(frozen=True)
class WeightDiag:
    ess: np.ndarray
    share_top1: np.ndarray
    q999: np.ndarray
    minimum: np.ndarray
    maximum: np.ndarray
    mean: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "time": np.arange(1, self.ess.size + 1),
                "ess": self.ess,
                "share_top1": self.share_top1,
                "q999": self.q999,
                "min": self.minimum,
                "max": self.maximum,
                "mean": self.mean,
            }
        )


def weight_diagnostics(ws: WeightSet | np.ndarray) -> WeightDiag:
    """ESS, top-1% share and the 99.9th percentile (linear interpolation) per time."""
    W = ws.W if isinstance(ws, WeightSet) else np.asarray(ws, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    return WeightDiag(
        ess=np.array([effective_sample_size(c) for c in W.T]),
        share_top1=np.array([top_share(c) for c in W.T]),
        q999=np.quantile(W, 0.999, axis=0, method="linear"),
        minimum=W.min(axis=0),
        maximum=W.max(axis=0),
        mean=W.mean(axis=0),
    )


def weighted_pearson(x, y, w) -> float:
    """Weighted Pearson correlation; NaN when either variable is constant."""
    w = np.asarray(w, dtype=float) / np.sum(w)
    xc = x - w @ x
    yc = y - w @ y
    vx, vy = w @ (xc * xc), w @ (yc * yc)
    scale_x = max(1.0, float(np.max(np.abs(x))))
    scale_y = max(1.0, float(np.max(np.abs(y))))
    if vx <= (1e-14 * scale_x) ** 2 or vy <= (1e-14 * scale_y) ** 2:
        return float("nan")
    return float((w @ (xc * yc)) / math.sqrt(vx * vy))


def weighted_midranks(x, w) -> np.ndarray:
    """Weight below each value plus half the weight tied with it."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    order = np.argsort(x, kind="mergesort")
    xs, ws = x[order], w[order]
    uniq, start = np.unique(xs, return_index=True)
    group_w = np.add.reduceat(ws, start)
    below = np.concatenate([[0.0], np.cumsum(group_w)[:-1]])
    ranks_sorted = np.repeat(below + 0.5 * group_w, np.diff(np.append(start, xs.size)))
    ranks = np.empty_like(ranks_sorted)
    ranks[order] = ranks_sorted
    return ranks


def weighted_spearman(x, y, w) -> float:
    return weighted_pearson(weighted_midranks(x, w), weighted_midranks(y, w), w)


def balance_table(
    panel: PanelData,
    ws: WeightSet | None,
    exclude: Iterable[str] = (),
    which: str = "step",
    threshold: float = BALANCE_THRESHOLD,
) -> pd.DataFrame:
    """Absolute weighted correlations between each ``A_s`` and its history columns.

    ``which="step"`` weights time ``s`` by the per-step weights, the ones
    that target balance at that time; ``"cumulative"`` uses ``W[:, s]``.
    ``ws=None`` gives unweighted correlations. Undefined correlations are NaN
    and never flagged.
    """
    exclude = tuple(exclude)
    rows = []
    for s in range(1, panel.K + 1):
        H = history_design(panel, s, exclude)
        if ws is None:
            w = np.ones(panel.n)
        else:
            w = ws.w_step[:, s - 1] if which == "step" else ws.W[:, s - 1]
        a = panel.A[:, s - 1]
        for c, name in enumerate(H.columns):
            if name == "const":
                continue
            x = H.X[:, c]
            p = weighted_pearson(a, x, w)
            sp = weighted_spearman(a, x, w)
            rows.append(
                {
                    "time": s,
                    "covariate": name,
                    "pearson": abs(p),
                    "spearman": abs(sp),
                    "flagged": bool(np.nan_to_num(max(abs(p), abs(sp)), nan=0.0) > threshold),
                }
            )
    return pd.DataFrame(rows, columns=["time", "covariate", "pearson", "spearman", "flagged"])


def flagged_covariates(table: pd.DataFrame, k: int | None = None) -> list[str]:
    """Covariates flagged at any time up to ``k`` (all times when ``None``), first-seen order."""
    sel = table[table["flagged"]]
    if k is not None:
        sel = sel[sel["time"] <= k]
    return list(dict.fromkeys(sel["covariate"]))
