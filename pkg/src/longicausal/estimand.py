"""Regime contrasts from fitted effect grids.

``Delta_k`` compares sustained exposure at ``a_high`` with sustained exposure
at ``a_low`` through time ``k``: ``sum_{j<=k} beta_k(j) * (a_high - a_low)``.
Intervals come from a parametric bootstrap that redraws the coefficients
from their normal approximation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .effects import FitReport
from .numkit import mvn_sample


@dataclass(frozen=True)
class ContrastResult:
    k: int
    a_high: float
    a_low: float
    delta: float
    ci_lo: float
    ci_hi: float
    n_draws: int
    seed: int | None
    level: float = 0.95
    draw_mean: float = float("nan")
    draw_sd: float = float("nan")

    def as_dict(self) -> dict:
        return asdict(self)


def contrast_delta(fit: FitReport, k: int, a_high: float = 1.0, a_low: float = 0.0) -> float:
    coef, _ = fit.outcome_block(k)
    return float(coef.sum() * (a_high - a_low))


def _decay_sums(draws: np.ndarray, times: np.ndarray, k: int) -> np.ndarray:
    lags = times[k - 1] - times[:k]
    beta, alpha = draws[:, 0], draws[:, 1]
    return beta * np.sum(np.power(alpha[:, None], lags[None, :]), axis=1)


def bootstrap_ci(
    fit: FitReport,
    k: int,
    a_high: float = 1.0,
    a_low: float = 0.0,
    n_draws: int = 1000,
    level: float = 0.95,
    seed: int | None = 0,
) -> ContrastResult:
    """Percentile interval for ``Delta_k`` from normal draws of the coefficients.

    Saturated fits draw ``beta_k(1..k)`` from their sandwich block. Decay
    fits draw ``(beta, alpha)`` and expand each draw through the decay map,
    so the non-linearity in ``alpha`` is carried into the interval.
    """
    delta = contrast_delta(fit, k, a_high, a_low)
    scale = a_high - a_low
    if fit.structure == "decay":
        idx = [fit.index("beta"), fit.index("alpha")]
        draws = mvn_sample(fit.params[idx], fit.cov_sandwich[np.ix_(idx, idx)], n_draws, seed=seed)
        times = fit.times if fit.times is not None else np.arange(1.0, fit.K + 1)
        values = _decay_sums(draws, times, k) * scale
    else:
        coef, cov = fit.outcome_block(k)
        values = mvn_sample(coef, cov, n_draws, seed=seed).sum(axis=1) * scale
    tail = 50.0 * (1.0 - level)
    lo, hi = np.percentile(values, [tail, 100.0 - tail])
    return ContrastResult(
        k=k,
        a_high=a_high,
        a_low=a_low,
        delta=delta,
        ci_lo=float(lo),
        ci_hi=float(hi),
        n_draws=n_draws,
        seed=seed,
        level=level,
        draw_mean=float(values.mean()),
        draw_sd=float(values.std(ddof=1)) if n_draws > 1 else 0.0,
    )


def implied_cumulative(beta: float, alpha: float, k: int, times: Sequence[float] | None = None) -> float:
    """``C_k = beta * sum_{j<=k} alpha^(t_k - t_j)``; unit spacing when ``times`` is omitted."""
    t = np.arange(1.0, k + 1) if times is None else np.asarray(times, dtype=float)
    lags = t[k - 1] - t[:k]
    return float(beta * np.sum(np.power(alpha, lags)))


def contrast_table(
    fits: Mapping[str, FitReport],
    ks: Sequence[int] | None = None,
    a_high: float = 1.0,
    a_low: float = 0.0,
    n_draws: int = 1000,
    level: float = 0.95,
    seed: int | None = 0,
) -> pd.DataFrame:
    """One row per (method, k) with the contrast and its bootstrap interval."""
    rows = []
    for method, fit in fits.items():
        for k in ks or range(1, fit.K + 1):
            res = bootstrap_ci(fit, k, a_high, a_low, n_draws, level, seed)
            rows.append({"method": method, **res.as_dict()})
    return pd.DataFrame(rows)


def trajectory_table(fit: FitReport) -> pd.DataFrame:
    """Long table of ``beta_k(j)`` for plotting effect trajectories over lags."""
    grid = fit.grid()
    times = fit.times if fit.times is not None else np.arange(1.0, grid.K + 1)
    rows = [
        {"k": k, "j": j, "lag": float(times[k - 1] - times[j - 1]), "coef": grid[k, j]}
        for k in range(1, grid.K + 1)
        for j in range(1, k + 1)
    ]
    return pd.DataFrame(rows)
