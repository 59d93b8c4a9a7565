"""Monte Carlo harness: simulate, fit every estimator, summarize.

Replicate ``r`` draws its panel with seed ``base + r``, so any replicate can
be rerun in isolation and replicates can be farmed out to worker processes
without splitting random streams. Set ``LONGICAUSAL_THREADS`` to cap the
number of workers.
"""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.stats import norm

from .effects import grid_index, param_label
from .errors import DimensionMismatch, LongiCausalError, McAborted
from .estimand import implied_cumulative
from .gest import fit_gmm_basic, fit_gmm_efficient, fit_sequential_all
from .iv import fit_iv_decay
from .msm import fit_msm_all
from .simgen import ScenarioConfig, scenario_preset, simulate_panel
from .weights import fit_weights_balanced, fit_weights_gaussian, weight_diagnostics

logger = logging.getLogger(__name__)

ESTIMATORS = (
    "iptw",
    "iptw-gaussian",
    "gest-sequential",
    "gest-basic",
    "gest-efficient",
    "iv",
    "iv-residual",
)
MAX_FAILURE_RATE = 0.2


def worker_count(default: int = 1) -> int:
    raw = os.environ.get("LONGICAUSAL_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        return default


# ---------------------------------------------------------------------------
# summaries


def summarize(estimates, ses, truth, level: float = 0.95, naive_ses=None) -> pd.DataFrame:
    """Per-parameter bias and calibration metrics over replicates.

    ``estimates`` and ``ses`` are ``R x q``; rows with a NaN estimate are
    dropped parameter by parameter. Coverage counts replicates with
    ``|est - truth| <= z * se``.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    se = np.atleast_2d(np.asarray(ses, dtype=float))
    truth = np.atleast_1d(np.asarray(truth, dtype=float))
    if est.shape != se.shape or est.shape[1] != truth.size:
        raise DimensionMismatch(f"estimates {est.shape}, ses {se.shape}, truth {truth.shape} do not agree")
    naive = None if naive_ses is None else np.atleast_2d(np.asarray(naive_ses, dtype=float))
    if naive is not None and naive.shape != est.shape:
        raise DimensionMismatch("naive SEs must match the estimates")
    z = float(norm.ppf(0.5 + level / 2.0))
    rows = []
    for c in range(truth.size):
        ok = np.isfinite(est[:, c])
        e, s = est[ok, c], se[ok, c]
        err = e - truth[c]
        row = {
            "truth": truth[c],
            "estimate": e.mean() if e.size else np.nan,
            "mae": np.abs(err).mean() if e.size else np.nan,
            "rmse": np.sqrt(np.mean(err**2)) if e.size else np.nan,
            "empsd": e.std(ddof=1) if e.size > 1 else np.nan,
            "sand_se": s.mean() if e.size else np.nan,
            "cov_sand": np.mean(np.abs(err) <= z * s) if e.size else np.nan,
            "n_reps": int(e.size),
        }
        if naive is not None:
            nv = naive[ok, c]
            row["reg_se"] = nv.mean() if e.size else np.nan
            row["cov_reg"] = np.mean(np.abs(err) <= z * nv) if e.size else np.nan
        rows.append(row)
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# one replicate


def _delta_se(cov_block: np.ndarray) -> float:
    return float(np.sqrt(max(cov_block.sum(), 0.0)))


def _saturated_records(name, fit, K):
    rows = []
    se_naive = fit.se_naive
    for k in range(1, K + 1):
        idx = fit.blocks[k]
        for j, i in enumerate(idx, start=1):
            rows.append((name, param_label(k, j), fit.params[i], fit.se_sandwich[i], np.nan if se_naive is None else se_naive[i]))
    coef, cov = fit.outcome_block(K)
    naive = np.nan
    if fit.cov_naive is not None:
        idx = fit.blocks[K]
        naive = _delta_se(fit.cov_naive[np.ix_(idx, idx)])
    rows.append((name, f"Delta_{K}", coef.sum(), _delta_se(cov), naive))
    return rows


def _iv_records(name, fit, K):
    rows = [
        (name, "beta", fit.beta, fit.se[0], np.nan),
        (name, "alpha", fit.alpha, fit.se[1], np.nan),
    ]
    for k in range(2, K + 1):
        lags = fit.times[k - 1] - fit.times[:k]
        grad = np.array([np.sum(np.power(fit.alpha, lags)), fit.beta * np.sum(lags * np.power(fit.alpha, np.maximum(lags - 1, 0)))])
        se = float(np.sqrt(max(grad @ fit.cov_sandwich @ grad, 0.0)))
        rows.append((name, f"C_{k}", implied_cumulative(fit.beta, fit.alpha, k, fit.times), se, np.nan))
    if fit.partial_F is not None:
        for k, f in enumerate(fit.partial_F, start=1):
            rows.append((name, f"partial_F_{k}", f, np.nan, np.nan))
    return rows


def run_replicate(cfg: ScenarioConfig, estimators: Sequence[str], seed: int) -> tuple[list, list, dict]:
    """Fit ``estimators`` on one simulated panel.

    Returns the coefficient records ``(estimator, param, estimate, se, naive_se)``,
    the list of estimators that failed, and weight diagnostics keyed by method.
    """
    panel = simulate_panel(cfg, seed)
    exclude = cfg.estimation_exclude()
    K = panel.K
    records, failed, diags = [], [], {}
    for name in estimators:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                if name in ("iptw", "iptw-gaussian"):
                    fitter = fit_weights_balanced if name == "iptw" else fit_weights_gaussian
                    _, ws = fitter(panel, exclude)
                    if name == "iptw" and not all(ws.converged):
                        raise LongiCausalError("balance calibration did not converge")
                    d = weight_diagnostics(ws)
                    diags[name] = {"ess": d.ess, "share_top1": d.share_top1, "q999": d.q999}
                    records += _saturated_records(name, fit_msm_all(panel, ws), K)
                elif name == "gest-sequential":
                    coef = fit_sequential_all(panel, exclude)
                    records += [(name, param_label(k, j), c, np.nan, np.nan) for c, (k, j) in zip(coef, grid_index(K))]
                elif name == "gest-basic":
                    records += _saturated_records(name, fit_gmm_basic(panel, "saturated", exclude), K)
                elif name == "gest-efficient":
                    records += _saturated_records(name, fit_gmm_efficient(panel, "saturated", exclude), K)
                elif name in ("iv", "iv-residual"):
                    on = "baseline+tv" if cfg.wrong_partial_out else "baseline"
                    sigma = "residual" if name == "iv-residual" else "identity"
                    fit = fit_iv_decay(panel, sigma, seed=seed, partial_out_on=on, exclude=exclude)
                    if not fit.converged:
                        raise LongiCausalError("score minimization did not converge")
                    records += _iv_records(name, fit, K)
                else:
                    raise ValueError(f"unknown estimator {name!r}; choose from {ESTIMATORS}")
        except LongiCausalError as exc:
            logger.info("replicate %d: %s failed: %s", seed, name, exc)
            failed.append(name)
    return records, failed, diags


def _replicate_task(args):
    cfg, estimators, seed = args
    return run_replicate(cfg, estimators, seed)


# ---------------------------------------------------------------------------
# experiment


def truth_table(cfg: ScenarioConfig) -> dict[str, float]:
    """True values for every parameter name an estimator can report."""
    grid = cfg.total_effects()
    truth = {param_label(k, j): grid[k, j] for k, j in grid_index(cfg.K)}
    truth[f"Delta_{cfg.K}"] = float(grid.outcome_block(cfg.K).sum())
    for k in range(2, cfg.K + 1):
        truth[f"C_{k}"] = float(grid.outcome_block(k).sum())
    if "decay" in cfg.effect:
        truth["beta"], truth["alpha"] = cfg.effect["decay"]
    else:
        truth["beta"] = truth["alpha"] = np.nan
    return truth


@dataclass
class McResult:
    """Per-replicate records and the per-parameter summary table."""

    design: str
    config: ScenarioConfig
    records: pd.DataFrame
    summary: pd.DataFrame
    diagnostics: pd.DataFrame
    failures: dict[str, int]
    n_reps: int
    seed: int

    def metric(self, estimator: str, param: str, column: str) -> float:
        row = self.summary[(self.summary.estimator == estimator) & (self.summary.param == param)]
        if row.empty:
            raise KeyError((estimator, param))
        return float(row[column].iloc[0])

    def values(self, estimator: str, param: str) -> np.ndarray:
        sel = self.records[(self.records.estimator == estimator) & (self.records.param == param)]
        return sel.sort_values("rep")["estimate"].to_numpy()

    def diag_values(self, method: str, field: str, time: int) -> np.ndarray:
        sel = self.diagnostics[(self.diagnostics.method == method) & (self.diagnostics.time == time)]
        return sel.sort_values("rep")[field].to_numpy()


def run_design(
    design: str | ScenarioConfig,
    estimators: Sequence[str] = ("iptw", "gest-basic", "gest-efficient", "iv"),
    n_reps: int = 500,
    seed: int = 20240101,
    n_jobs: int | None = None,
    level: float = 0.95,
) -> McResult:
    """Replicate simulate-then-fit ``n_reps`` times and summarize.

    Failed fits are excluded and counted per estimator; more than 20%
    failures for any estimator aborts the experiment.
    """
    if n_reps < 2:
        raise ValueError("n_reps must be at least 2")
    if isinstance(design, ScenarioConfig):
        cfg, name = design, "custom"
    else:
        cfg, name = scenario_preset(design), design
    for e in estimators:
        if e not in ESTIMATORS:
            raise ValueError(f"unknown estimator {e!r}; choose from {ESTIMATORS}")
    n_jobs = worker_count() if n_jobs is None else n_jobs
    tasks = [(cfg, tuple(estimators), seed + r) for r in range(n_reps)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_replicate_task, tasks, chunksize=max(1, n_reps // (4 * n_jobs))))
    else:
        results = [_replicate_task(t) for t in tasks]

    rec_rows, diag_rows = [], []
    failures = {e: 0 for e in estimators}
    for r, (records, failed, diags) in enumerate(results):
        for e in failed:
            failures[e] += 1
        rec_rows += [(r, seed + r, *row) for row in records]
        for method, d in diags.items():
            for t in range(len(d["ess"])):
                diag_rows.append((r, method, t + 1, d["ess"][t], d["share_top1"][t], d["q999"][t]))
    for e, count in failures.items():
        if count > MAX_FAILURE_RATE * n_reps:
            raise McAborted(f"{e} failed in {count} of {n_reps} replicates")

    records = pd.DataFrame(rec_rows, columns=["rep", "seed", "estimator", "param", "estimate", "se", "naive_se"])
    diagnostics = pd.DataFrame(diag_rows, columns=["rep", "method", "time", "ess", "share_top1", "q999"])
    truth = truth_table(cfg)
    parts = []
    for (est, param), grp in records.groupby(["estimator", "param"], sort=False):
        grp = grp.sort_values("rep")
        naive = grp["naive_se"].to_numpy()[:, None] if np.isfinite(grp["naive_se"]).any() else None
        summ = summarize(
            grp["estimate"].to_numpy()[:, None],
            grp["se"].to_numpy()[:, None],
            [truth.get(param, np.nan)],
            level,
            naive,
        )
        summ.insert(0, "param", param)
        summ.insert(0, "estimator", est)
        summ["failures"] = failures.get(est, 0)
        summ["n"] = cfg.n
        summ["seed"] = seed
        parts.append(summ)
    summary = pd.concat(parts, ignore_index=True) if parts else pd.DataFrame()
    return McResult(name, cfg, records, summary, diagnostics, failures, n_reps, seed)
