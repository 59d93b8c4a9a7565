"""Instrumental-variable G-estimation under the decay model.

With ``r_{i,k}(theta) = Y_{i,k} - sum_{j<=k} beta alpha^(t_k - t_j) A_{i,j}``
the estimating score is ``S(theta) = sum_i (G_i - mean G) Sigma^{-1} r_i(theta)``,
a vector of length ``K``. ``theta = (beta, alpha)`` minimizes ``S'S``. For
``K = 1`` the single moment gives the Wald ratio and ``alpha`` is not
identified.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .effects import FitReport
from .errors import (
    DegenerateExposureWarning,
    DegenerateInstrument,
    DimensionMismatch,
    NoConvergence,
    UnderIdentified,
)
from .numkit import fd_jacobian, minimize_simplex, ols_residuals, rng_new, solve_linear, symmetrize, wls_fit
from .panel import PanelData

SIGMA_SPECS = ("identity", "residual")
PARTIAL_OUT = ("none", "baseline", "baseline+tv")

BETA_STARTS = (-2.0, -1.0, 0.0, 1.0)
ALPHA_STARTS = (0.3, 0.6, 0.9)


def _covariates(panel: PanelData, on: str, exclude: Iterable[str], k: int | None = None) -> tuple[np.ndarray, list[str]]:
    """Intercept, baseline covariates and, for ``"baseline+tv"``, the time-``k`` covariate ``V_k``."""
    L0, names = panel.baseline(exclude)
    cols = [np.ones(panel.n), L0]
    labels = ["const"] + names
    if on == "baseline+tv" and panel.V is not None and k is not None:
        cols.append(panel.V[:, k - 1])
        labels.append(f"V{k}")
    return np.column_stack(cols), labels


def partial_out(panel: PanelData, on: str = "baseline", exclude: Iterable[str] = ()) -> PanelData:
    """Replace every ``A_k`` and ``Y_k`` by its OLS residual on the covariates.

    ``on="baseline"`` uses an intercept and the baseline covariates.
    ``"baseline+tv"`` also adjusts ``A_k`` and ``Y_k`` for the concurrent
    ``V_k``, which is invalid when ``V`` lies on the exposure pathway.
    """
    if on not in PARTIAL_OUT:
        raise ValueError(f"on must be one of {PARTIAL_OUT}")
    if on == "none":
        return panel
    A_res = np.empty_like(panel.A)
    Y_res = np.empty_like(panel.Y)
    for k in range(1, panel.K + 1):
        X, names = _covariates(panel, on, exclude, k)
        res = ols_residuals(X, np.column_stack([panel.A[:, k - 1], panel.Y[:, k - 1]]), names)
        A_res[:, k - 1], Y_res[:, k - 1] = res[:, 0], res[:, 1]
        scale = max(float(np.std(panel.A[:, k - 1])), 1e-300)
        if float(np.std(A_res[:, k - 1])) <= 1e-10 * scale:
            warnings.warn(f"A{k} is fully explained by the covariates", DegenerateExposureWarning, stacklevel=2)
    return panel.replace(A=A_res, Y=Y_res)


def partial_f(panel: PanelData, j: int, covariates: np.ndarray | None = None, names=None) -> float:
    """First-stage partial F for adding ``G`` to an OLS of ``A_j`` on the covariates.

    ``covariates`` must include the intercept; by default it is an
    intercept plus all baseline covariates.
    """
    if panel.G is None:
        raise DegenerateInstrument("panel has no instrument column")
    if np.ptp(panel.G) == 0.0:
        raise DegenerateInstrument("instrument has zero variance")
    if covariates is None:
        covariates, names = _covariates(panel, "baseline", (), j)
    X0 = np.asarray(covariates, dtype=float)
    n, q = X0.shape
    if n <= q + 1:
        raise DimensionMismatch("too few rows for a partial F statistic")
    a = panel.A[:, j - 1]
    names0 = list(names) if names is not None else [f"x{c}" for c in range(q)]
    rss0 = float(np.sum(wls_fit(X0, a, names=names0).residuals ** 2))
    rss1 = float(np.sum(wls_fit(np.column_stack([X0, panel.G]), a, names=names0 + ["G"]).residuals ** 2))
    return (rss0 - rss1) / (rss1 / (n - q - 1))


def partial_f_all(panel: PanelData, exclude: Iterable[str] = (), on: str = "baseline") -> np.ndarray:
    """Partial F at every time point, conditioning on the partial-out covariates."""
    on = "baseline" if on == "none" else on
    out = []
    for j in range(1, panel.K + 1):
        X, names = _covariates(panel, on, exclude, j)
        out.append(partial_f(panel, j, X, names))
    return np.array(out)


# ---------------------------------------------------------------------------
# score


@dataclass(frozen=True, eq=False)
class IvScore:
    """Score pieces for a panel with a shared time grid.

    The score is linear in the data, so it reduces to the instrument
    cross-products ``c_Y[k] = sum_i Gc_i Y_ik`` and ``c_A[j] = sum_i Gc_i A_ij``.
    """

    Gc: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    times: np.ndarray
    c_Y: np.ndarray
    c_A: np.ndarray
    lags: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_panel(cls, panel: PanelData) -> "IvScore":
        if panel.G is None:
            raise DegenerateInstrument("panel has no instrument column")
        Gc = panel.G - panel.G.mean()
        if float(np.sum(Gc**2)) <= 1e-12 * max(1.0, float(np.sum(panel.G**2))):
            raise DegenerateInstrument("instrument has zero variance")
        times = panel.common_times
        if times is None:
            raise DimensionMismatch("IV G-estimation needs a time grid shared by all rows")
        lags = times[:, None] - times[None, :]
        mask = np.tril(np.ones((panel.K, panel.K), dtype=bool))
        return cls(
            Gc=Gc,
            A=np.asarray(panel.A),
            Y=np.asarray(panel.Y),
            times=times,
            c_Y=Gc @ panel.Y,
            c_A=Gc @ panel.A,
            lags=np.where(mask, lags, 0.0),
            mask=mask,
        )

    def coef_matrix(self, theta) -> np.ndarray:
        """``K x K`` lower-triangular ``beta alpha^(t_k - t_j)``."""
        beta, alpha = theta
        return np.where(self.mask, beta * np.power(alpha, self.lags), 0.0)

    def raw(self, theta) -> np.ndarray:
        """``sum_i Gc_i r_i(theta)`` before the ``Sigma^{-1}`` rotation."""
        return self.c_Y - self.coef_matrix(theta) @ self.c_A

    def residuals(self, theta) -> np.ndarray:
        return self.Y - self.A @ self.coef_matrix(theta).T

    def per_unit(self, theta, sigma_inv: np.ndarray) -> np.ndarray:
        return (self.Gc[:, None] * self.residuals(theta)) @ sigma_inv.T


@dataclass
class IvFit:
    beta: float
    alpha: float
    cov_sandwich: np.ndarray
    sigma_spec: str
    partial_out_applied: list[str] = field(default_factory=list)
    score_norm_at_solution: float = float("nan")
    partial_F: np.ndarray | None = None
    converged: bool = True
    alpha_fixed: bool = False
    sigma: np.ndarray | None = None
    n: int = 0
    K: int = 0
    times: np.ndarray | None = None

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.beta, self.alpha])

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov_sandwich), 0.0, None))

    def to_report(self) -> FitReport:
        info = {
            "sigma": self.sigma_spec,
            "partial_out": list(self.partial_out_applied),
            "score_norm": self.score_norm_at_solution,
            "partial_F": None if self.partial_F is None else [float(f) for f in self.partial_F],
            "converged": self.converged,
            "alpha_fixed": self.alpha_fixed,
        }
        return FitReport(
            estimator="iv",
            structure="decay",
            params=self.theta,
            names=["beta", "alpha"],
            cov_sandwich=self.cov_sandwich,
            n=self.n,
            K=self.K,
            times=self.times,
            info=info,
        )


def _minimize_score(score: IvScore, sigma_inv: np.ndarray, rng: np.random.Generator, n: int):
    def objective(theta):
        s = sigma_inv @ score.raw(theta) / n
        return float(s @ s)

    best = None
    for b0 in BETA_STARTS:
        for a0 in ALPHA_STARTS:
            res = minimize_simplex(objective, [b0, a0], restarts=1)
            if best is None or res.fun < best.fun:
                best = res
    # a jittered restart around the incumbent guards against a collapsed simplex
    jitter = best.x + 0.05 * rng.standard_normal(2) * np.maximum(np.abs(best.x), 1.0)
    res = minimize_simplex(objective, jitter, restarts=1)
    if res.fun < best.fun:
        best = res
    return best


def _iv_cov(score: IvScore, theta: np.ndarray, sigma_inv: np.ndarray, fix_alpha: bool) -> np.ndarray:
    n = score.Gc.size
    s_i = score.per_unit(theta, sigma_inv)
    sc = s_i - s_i.mean(axis=0)
    omega = sc.T @ sc / (n - 1)
    if fix_alpha:
        grad = fd_jacobian(lambda b: sigma_inv @ score.raw([b[0], theta[1]]) / n, theta[:1])
        ginv = np.linalg.pinv(grad)
        cov = np.zeros((2, 2))
        cov[:1, :1] = ginv @ omega @ ginv.T / n
        return cov
    grad = fd_jacobian(lambda th: sigma_inv @ score.raw(th) / n, theta)
    ginv = np.linalg.pinv(grad)
    return symmetrize(ginv @ omega @ ginv.T / n)


def fit_iv_decay(
    panel: PanelData,
    sigma: str = "identity",
    seed: int | None = 0,
    partial_out_on: str = "baseline",
    exclude: Iterable[str] = (),
    structure: str = "decay",
) -> IvFit:
    """IV G-estimate of ``(beta, alpha)``.

    The panel is first partialled out on the covariates named by
    ``partial_out_on`` (``"none"`` skips the step). ``sigma="residual"``
    refits once with ``Sigma`` set to the residual covariance at the
    identity-weighted solution.
    """
    if structure != "decay":
        if panel.K > 1:
            raise UnderIdentified(
                f"a saturated IV model has {panel.K * (panel.K + 1) // 2} effects but only {panel.K} score equations"
            )
    if sigma not in SIGMA_SPECS:
        raise ValueError(f"sigma must be one of {SIGMA_SPECS}")
    exclude = tuple(exclude)
    F = partial_f_all(panel, exclude, partial_out_on) if panel.G is not None else None
    work = partial_out(panel, partial_out_on, exclude)
    applied = [] if partial_out_on == "none" else _covariates(panel, partial_out_on, exclude)[1][1:]
    if partial_out_on == "baseline+tv":
        applied.append("V_k")
    score = IvScore.from_panel(work)
    n, K = work.n, work.K

    if K == 1:
        denom = score.c_A[0]
        if abs(denom) <= 1e-12 * np.sqrt(np.sum(score.Gc**2) * np.sum(score.A**2)):
            raise DegenerateInstrument("instrument is uncorrelated with the exposure")
        theta = np.array([score.c_Y[0] / denom, 1.0])
        eye = np.eye(1)
        return IvFit(
            beta=float(theta[0]),
            alpha=1.0,
            cov_sandwich=_iv_cov(score, theta, eye, fix_alpha=True),
            sigma_spec=sigma,
            partial_out_applied=applied,
            score_norm_at_solution=float(np.abs(score.raw(theta)).max()),
            partial_F=F,
            alpha_fixed=True,
            sigma=eye,
            n=n,
            K=K,
            times=score.times,
        )

    rng = rng_new(seed)
    sigma_inv = np.eye(K)
    best = _minimize_score(score, sigma_inv, rng, n)
    Sigma = np.eye(K)
    if sigma == "residual":
        r = score.residuals(best.x)
        Sigma = np.cov(r, rowvar=False)
        sigma_inv = solve_linear(Sigma, np.eye(K))
        best = _minimize_score(score, sigma_inv, rng, n)
    theta = np.asarray(best.x, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise NoConvergence("score minimization produced non-finite parameters")
    cov = _iv_cov(score, theta, sigma_inv, fix_alpha=False)
    return IvFit(
        beta=float(theta[0]),
        alpha=float(theta[1]),
        cov_sandwich=cov,
        sigma_spec=sigma,
        partial_out_applied=applied,
        score_norm_at_solution=float(np.linalg.norm(sigma_inv @ score.raw(theta))),
        partial_F=F,
        converged=bool(best.converged),
        sigma=Sigma,
        n=n,
        K=K,
        times=score.times,
    )
