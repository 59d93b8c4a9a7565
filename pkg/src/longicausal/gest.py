"""G-estimation of structural nested mean models.

For outcome ``Y_k`` and each exposure time ``j <= k`` the blipped-down
outcome ``Y_k - sum_{s>=j} beta_k(s) A_s`` must be mean-independent of the
exposure residual ``R_j = A_j - E[A_j | H_j]``. With linear nuisance models
these moments are linear in the coefficients and, per outcome, triangular.

Three estimators share the same point estimates in the saturated case:

* :func:`fit_sequential` peels coefficients off one at a time by OLS.
* :func:`fit_gmm_basic` solves the stacked moments ``R_j (Y_k - ...)``.
* :func:`fit_gmm_efficient` residualizes the blipped-down outcome and the
  later exposures on ``H_j`` as well, then re-weights by the inverse moment
  covariance. The residualization leaves the sample moments unchanged but
  removes nuisance noise from the per-unit moments, tightening the sandwich.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .effects import FitReport, decay_coefficients, grid_index, param_label
from .errors import (
    DimensionMismatch,
    SingularMatrix,
    SingularMomentSystem,
    SingularOmegaWarning,
)
from .numkit import (
    fd_jacobian,
    hc1_omega,
    minimize_simplex,
    ols_residuals,
    solve_linear,
    symmetrize,
    weighted_gmm_cov,
    wls_fit,
)
from .panel import PanelData, history_design

FLAVORS = ("basic", "efficient")
STRUCTURES = ("saturated", "decay")


@dataclass(frozen=True, eq=False)
class MomentSystem:
    """Stacked linear moments ``g_i(b) = base_i - D_i b`` over all ``(k, j)``.

    Rows and parameters are both indexed outcome-major by ``(k, j)``, so the
    saturated system is square. ``R[j-1]`` is the exposure residual at time
    ``j``; ``base`` and ``D`` are ``n x m`` and ``n x m x m``.
    """

    flavor: str
    K: int
    n: int
    R: np.ndarray
    base: np.ndarray
    D: np.ndarray

    @property
    def index(self) -> list[tuple[int, int]]:
        return grid_index(self.K)

    @property
    def M(self) -> np.ndarray:
        """Mean Jacobian of ``-g``: ``mean(g(b)) = b_vec - M b``."""
        return self.D.mean(axis=0)

    @property
    def b(self) -> np.ndarray:
        return self.base.mean(axis=0)

    def per_unit(self, coef) -> np.ndarray:
        coef = np.asarray(coef, dtype=float)
        return self.base - np.einsum("imp,p->im", self.D, coef)

    def mean_moments(self, coef) -> np.ndarray:
        return self.b - self.M @ np.asarray(coef, dtype=float)

    def jacobian(self) -> np.ndarray:
        """Analytic Jacobian of the mean moments with respect to the grid."""
        return -self.M


def build_moments(panel: PanelData, flavor: str = "basic", exclude: Iterable[str] = ()) -> MomentSystem:
    """Residualize on every history and assemble the per-unit moment arrays."""
    if flavor not in FLAVORS:
        raise ValueError(f"flavor must be one of {FLAVORS}, got {flavor!r}")
    exclude = tuple(exclude)
    n, K = panel.n, panel.K
    idx = grid_index(K)
    pos = {kj: c for c, kj in enumerate(idx)}
    m = len(idx)
    base = np.zeros((n, m))
    D = np.zeros((n, m, m))
    R = np.zeros((n, K))

    for j in range(1, K + 1):
        H = history_design(panel, j, exclude)
        later = slice(j - 1, K)
        if flavor == "basic":
            R[:, j - 1] = ols_residuals(H.X, panel.A[:, j - 1], H.columns)
            A_adj = panel.A[:, later]
            Y_adj = panel.Y[:, later]
        else:
            stacked = np.column_stack([panel.A[:, later], panel.Y[:, later]])
            res = ols_residuals(H.X, stacked, H.columns)
            A_adj, Y_adj = res[:, : K - j + 1], res[:, K - j + 1 :]
            R[:, j - 1] = A_adj[:, 0]
        r = R[:, j - 1]
        if np.linalg.norm(r) <= 1e-10 * max(np.linalg.norm(panel.A[:, j - 1]), 1e-300):
            raise SingularMomentSystem(f"A{j} is fully explained by its history")
        for k in range(j, K + 1):
            row = pos[(k, j)]
            base[:, row] = r * Y_adj[:, k - j]
            for s in range(j, k + 1):
                D[:, row, pos[(k, s)]] = r * A_adj[:, s - j]
    return MomentSystem(flavor=flavor, K=K, n=n, R=R, base=base, D=D)


# ---------------------------------------------------------------------------
# sequential recursion


def fit_sequential(panel: PanelData, k: int, exclude: Iterable[str] = ()) -> np.ndarray:
    """``beta_k(1..k)`` by backward OLS on ``(A_j, H_j)`` with blipping down."""
    exclude = tuple(exclude)
    y = np.array(panel.Y[:, k - 1])
    coef = np.zeros(k)
    for j in range(k, 0, -1):
        H = history_design(panel, j, exclude)
        X = np.column_stack([panel.A[:, j - 1], H.X])
        fit = wls_fit(X, y, names=(f"A{j}",) + H.columns)
        coef[j - 1] = fit.coef[0]
        y = y - coef[j - 1] * panel.A[:, j - 1]
    return coef


def fit_sequential_all(panel: PanelData, exclude: Iterable[str] = ()) -> np.ndarray:
    """Outcome-major vector of all sequential estimates."""
    return np.concatenate([fit_sequential(panel, k, exclude) for k in range(1, panel.K + 1)])


# ---------------------------------------------------------------------------
# GMM


def _invert_omega(omega: np.ndarray) -> tuple[np.ndarray, bool]:
    try:
        return solve_linear(omega, np.eye(omega.shape[0])), False
    except SingularMatrix:
        warnings.warn("moment covariance is singular; adding a 1e-8 ridge", SingularOmegaWarning, stacklevel=3)
        ridged = omega + 1e-8 * np.eye(omega.shape[0])
        return np.linalg.inv(ridged), True


def _blocks(K: int) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for c, (k, _) in enumerate(grid_index(K)):
        out.setdefault(k, []).append(c)
    return out


def _decay_map(times: np.ndarray, K: int):
    def expand(theta):
        beta, alpha = theta
        return np.concatenate([decay_coefficients(beta, alpha, times, k) for k in range(1, K + 1)])

    return expand


def _decay_start(ms: MomentSystem) -> list[np.ndarray]:
    sat = _solve_saturated(ms)
    starts = [np.array([sat[0], 0.5])]
    starts += [np.array([b, a]) for b in (-2.0, -1.0, 0.0, 1.0) for a in (0.3, 0.6, 0.9)]
    return starts


def _solve_saturated(ms: MomentSystem, W: np.ndarray | None = None) -> np.ndarray:
    M, b = ms.M, ms.b
    try:
        if W is None:
            return solve_linear(M, b)
        return solve_linear(M.T @ W @ M, M.T @ W @ b)
    except SingularMatrix as exc:
        raise SingularMomentSystem(str(exc)) from exc


def _fit_decay(ms: MomentSystem, times: np.ndarray, W: np.ndarray, theta0=None):
    expand = _decay_map(times, ms.K)

    def objective(theta):
        m = ms.mean_moments(expand(theta))
        return float(m @ W @ m)

    starts = _decay_start(ms) if theta0 is None else [np.asarray(theta0, dtype=float)]
    best = None
    for x0 in starts:
        res = minimize_simplex(objective, x0, restarts=2)
        if best is None or res.fun < best.fun:
            best = res
    return best, expand


def _report(
    ms: MomentSystem,
    structure: str,
    coef: np.ndarray,
    W: np.ndarray,
    times: np.ndarray,
    exclude,
    estimator: str,
    info: dict,
    expand=None,
) -> FitReport:
    omega = hc1_omega(ms.per_unit(coef if expand is None else expand(coef)))
    if structure == "saturated":
        J = ms.jacobian()
        cov = weighted_gmm_cov(J, omega, W, ms.n)
        names = [param_label(k, j) for k, j in grid_index(ms.K)]
        blocks = _blocks(ms.K)
        moments = ms.mean_moments(coef)
    else:
        J = fd_jacobian(lambda th: ms.mean_moments(expand(th)), coef)
        cov = weighted_gmm_cov(J, omega, W, ms.n)
        names = ["beta", "alpha"]
        blocks = {}
        moments = ms.mean_moments(expand(coef))
    info = {**info, "moment_norm_inf": float(np.max(np.abs(moments))), "exclude": sorted(exclude)}
    return FitReport(
        estimator=estimator,
        structure=structure,
        params=coef,
        names=names,
        cov_sandwich=symmetrize(cov),
        blocks=blocks,
        n=ms.n,
        K=ms.K,
        times=times,
        info=info,
    )


def _times(panel: PanelData) -> np.ndarray:
    t = panel.common_times
    if t is None:
        raise DimensionMismatch("decay-structured G-estimation needs a time grid shared by all rows")
    return t


def fit_gmm_basic(panel: PanelData, structure: str = "saturated", exclude: Iterable[str] = ()) -> FitReport:
    """Joint GMM on the stacked moments ``R_j (Y_k - sum_s beta_k(s) A_s)``.

    The saturated system is just-identified and solved exactly. The decay
    structure minimizes the identity-weighted quadratic form by simplex.
    """
    if structure not in STRUCTURES:
        raise ValueError(f"structure must be one of {STRUCTURES}")
    exclude = tuple(exclude)
    ms = build_moments(panel, "basic", exclude)
    times = panel.common_times if panel.common_times is not None else np.arange(1.0, panel.K + 1)
    W = np.eye(ms.M.shape[0])
    if structure == "saturated":
        coef = _solve_saturated(ms)
        return _report(ms, structure, coef, W, times, exclude, "gest-basic", {})
    times = _times(panel)
    res, expand = _fit_decay(ms, times, W)
    info = {"converged": res.converged, "objective": res.fun}
    return _report(ms, structure, res.x, W, times, exclude, "gest-basic", info, expand)


def fit_gmm_efficient(panel: PanelData, structure: str = "saturated", exclude: Iterable[str] = ()) -> FitReport:
    """Two-step GMM on doubly residualized moments.

    Step one uses identity weighting; step two re-solves with the inverse of
    the HC1 moment covariance evaluated at the step-one estimate.
    """
    if structure not in STRUCTURES:
        raise ValueError(f"structure must be one of {STRUCTURES}")
    exclude = tuple(exclude)
    ms = build_moments(panel, "efficient", exclude)
    m = ms.M.shape[0]
    if structure == "saturated":
        times = panel.common_times if panel.common_times is not None else np.arange(1.0, panel.K + 1)
        step1 = _solve_saturated(ms)
        W, ridged = _invert_omega(hc1_omega(ms.per_unit(step1)))
        coef = _solve_saturated(ms, W)
        return _report(ms, structure, coef, W, times, exclude, "gest-efficient", {"ridge": ridged})
    times = _times(panel)
    res1, expand = _fit_decay(ms, times, np.eye(m))
    W, ridged = _invert_omega(hc1_omega(ms.per_unit(expand(res1.x))))
    res2, _ = _fit_decay(ms, times, W, theta0=res1.x)
    info = {"converged": bool(res1.converged and res2.converged), "objective": res2.fun, "ridge": ridged}
    return _report(ms, structure, res2.x, W, times, exclude, "gest-efficient", info, expand)


def blip_down(Y_k: np.ndarray, A: np.ndarray, coef: np.ndarray, j: int) -> np.ndarray:
    """``Y_k - sum_{s>=j} coef[s-1] A_s`` computed by one matrix product."""
    k = coef.size
    return Y_k - A[:, j - 1 : k] @ coef[j - 1 : k]
