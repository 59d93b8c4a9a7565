"""Shared numeric kernel.

Least squares with an explicit rank check, GMM/HC1 sandwich covariances,
finite-difference Jacobians, multivariate-normal draws, restarted
Nelder-Mead and the seeded random generator used across the package.

Everything here is a pure function of its inputs. Random streams come from
:func:`rng_new`, which wraps NumPy's PCG64 (a 128-bit state, 64-bit output
permuted congruential generator); parallel callers derive independent
streams as ``seed = base_seed + replicate_index``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
from scipy import optimize

from .errors import (
    DimensionMismatch,
    NonFiniteMoment,
    NotPSD,
    RankDeficient,
    SingularJacobian,
    SingularMatrix,
)

logger = logging.getLogger(__name__)

#: Relative pivot size below which a column counts as linearly dependent.
RANK_TOL = 1e-10


# ---------------------------------------------------------------------------
# random numbers


def rng_new(seed: int | None) -> np.random.Generator:
    """Return a fresh PCG64-backed generator for ``seed``."""
    return np.random.Generator(np.random.PCG64(seed))


def standard_normal(rng: np.random.Generator, size) -> np.ndarray:
    return rng.standard_normal(size)


def binomial2(rng: np.random.Generator, p: float, size) -> np.ndarray:
    """Binomial(2, p) draws built from two independent Bernoulli(p) trials."""
    first = rng.random(size) < p
    second = rng.random(size) < p
    return first.astype(float) + second.astype(float)


# ---------------------------------------------------------------------------
# least squares


@dataclass(frozen=True)
class RegFit:
    """Result of a (weighted) least-squares fit.

    ``XtWX_inv`` is ``(X' W X)^{-1}``; ``sigma2`` is the weighted residual
    variance ``sum(w e^2) / dof``, so ``cov_classical`` reproduces the usual
    weighted-regression covariance.
    """

    coef: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray
    XtWX_inv: np.ndarray
    dof: int
    sigma2: float
    columns: tuple[str, ...]

    @property
    def cov_classical(self) -> np.ndarray:
        return self.sigma2 * self.XtWX_inv


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def _column_names(names: Sequence[str] | None, q: int) -> tuple[str, ...]:
    if names is None:
        return tuple(f"x{c}" for c in range(q))
    if len(names) != q:
        raise DimensionMismatch(f"{len(names)} column names for {q} columns")
    return tuple(names)


def pivoted_qr(X: np.ndarray, names: Sequence[str] | None = None):
    """Pivoted QR of ``X`` with column scaling; raises on rank deficiency.

    Returns ``(Q, R, perm)`` such that ``X[:, perm] = Q @ R`` (economic).
    """
    X = _as_matrix(X)
    n, q = X.shape
    cols = _column_names(names, q)
    norms = np.sqrt(np.einsum("ij,ij->j", X, X))
    zero = norms == 0.0
    if zero.any():
        raise RankDeficient([cols[c] for c in np.flatnonzero(zero)])
    Q, R, perm = sla.qr(X / norms, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_TOL * diag[0]))
    if rank < q:
        raise RankDeficient([cols[c] for c in perm[rank:]])
    # undo the column scaling so that X[:, perm] = Q R
    R = R * norms[perm][None, :]
    return Q, R, perm


def wls_fit(X, y, w=None, names: Sequence[str] | None = None) -> RegFit:
    """Weighted least squares, ``argmin sum w_i (y_i - x_i'c)^2``.

    ``w=None`` gives ordinary least squares. The design must have full
    column rank; dependent columns are reported by name instead of being
    dropped silently.
    """
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    n, q = X.shape
    if y.shape != (n,):
        raise DimensionMismatch(f"y has shape {y.shape}, expected ({n},)")
    if w is None:
        w = np.ones(n)
    else:
        w = np.asarray(w, dtype=float)
        if w.shape != (n,):
            raise DimensionMismatch(f"w has shape {w.shape}, expected ({n},)")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise DimensionMismatch("weights must be finite and non-negative")
    if n <= q:
        raise DimensionMismatch(f"need more rows than columns (n={n}, q={q})")
    cols = _column_names(names, q)
    if np.count_nonzero(w) < q:
        raise RankDeficient(cols)

    sw = np.sqrt(w)
    Q, R, perm = pivoted_qr(X * sw[:, None], cols)
    coef_p = sla.solve_triangular(R, Q.T @ (y * sw))
    coef = np.empty(q)
    coef[perm] = coef_p
    Rinv = sla.solve_triangular(R, np.eye(q))
    inv_p = Rinv @ Rinv.T
    XtWX_inv = np.empty((q, q))
    XtWX_inv[np.ix_(perm, perm)] = inv_p

    fitted = X @ coef
    resid = y - fitted
    dof = n - q
    sigma2 = float(np.sum(w * resid**2) / dof)
    return RegFit(coef, resid, fitted, XtWX_inv, dof, sigma2, cols)


def ols_residuals(X, Y, names: Sequence[str] | None = None) -> np.ndarray:
    """Residuals of every column of ``Y`` after OLS projection on ``X``."""
    X = _as_matrix(X)
    Y = np.asarray(Y, dtype=float)
    vec = Y.ndim == 1
    Ym = Y[:, None] if vec else Y
    Q, _, _ = pivoted_qr(X, names)
    resid = Ym - Q @ (Q.T @ Ym)
    return resid[:, 0] if vec else resid


# ---------------------------------------------------------------------------
# linear algebra plumbing


def solve_linear(A, b) -> np.ndarray:
    """Solve ``A x = b`` by pivoted LU, refusing numerically singular ``A``."""
    A = np.asarray(A, dtype=float)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu, piv = sla.lu_factor(A, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise SingularMatrix(str(exc)) from exc
    if np.any(np.diag(lu) == 0.0) or np.linalg.cond(A) > 1e14:
        raise SingularMatrix("matrix is singular to working precision")
    return sla.lu_solve((lu, piv), np.asarray(b, dtype=float))


def cholesky(A) -> np.ndarray:
    """Lower Cholesky factor; :class:`NotPSD` when ``A`` is not positive definite."""
    try:
        return np.linalg.cholesky(np.asarray(A, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise NotPSD(str(exc)) from exc


def symmetrize(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


# ---------------------------------------------------------------------------
# derivatives and sandwich covariances


def fd_jacobian(fun: Callable[[np.ndarray], np.ndarray], theta, rel_step: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian with step ``rel_step * (1 + |theta_i|)``."""
    theta = np.asarray(theta, dtype=float)
    f0 = np.atleast_1d(np.asarray(fun(theta), dtype=float))
    jac = np.empty((f0.size, theta.size))
    for i in range(theta.size):
        h = rel_step * (1.0 + abs(theta[i]))
        up = theta.copy()
        dn = theta.copy()
        up[i] += h
        dn[i] -= h
        jac[:, i] = (np.atleast_1d(fun(up)) - np.atleast_1d(fun(dn))) / (2.0 * h)
    return jac


@dataclass(frozen=True)
class SandwichCov:
    cov: np.ndarray
    flavor: str
    jacobian: np.ndarray
    omega: np.ndarray

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


def gmm_sandwich(
    moment_fn: Callable[[np.ndarray], np.ndarray],
    theta_hat,
    jacobian: np.ndarray | Callable | None = None,
    flavor: str = "HC1",
) -> SandwichCov:
    """Sandwich covariance ``(1/n) J^{-1} Omega J^{-T}`` for a moment estimator.

    Parameters
    ----------
    moment_fn
        Maps a parameter vector to the ``n x q`` matrix of per-unit moments.
    theta_hat
        Estimate at which the covariance is evaluated.
    jacobian
        Jacobian of the *mean* moment vector. An array is used as given, a
        callable is evaluated at ``theta_hat``; ``None`` falls back to central
        finite differences.
    flavor
        ``"HC1"`` / ``"GMM"``: centred moment covariance scaled by
        ``n / (n - q)`` and a square Jacobian inverted exactly.
        ``"IV-MoorePenrose"``: sample covariance (``n - 1`` divisor) of the
        per-unit scores and the Moore-Penrose inverse of a possibly
        non-square Jacobian.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    g = np.asarray(moment_fn(theta_hat), dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    if not np.all(np.isfinite(g)):
        raise NonFiniteMoment("per-unit moments contain non-finite values")
    n, q = g.shape

    if jacobian is None:
        J = fd_jacobian(lambda th: moment_fn(th).mean(axis=0), theta_hat)
    elif callable(jacobian):
        J = np.asarray(jacobian(theta_hat), dtype=float)
    else:
        J = np.asarray(jacobian, dtype=float)
    if J.shape != (q, theta_hat.size):
        raise DimensionMismatch(f"Jacobian shape {J.shape} != ({q}, {theta_hat.size})")

    if flavor == "IV-MoorePenrose":
        gc = g - g.mean(axis=0)
        omega = gc.T @ gc / (n - 1)
        Jinv = np.linalg.pinv(J)
    else:
        omega = hc1_omega(g)
        if J.shape[0] != J.shape[1]:
            raise SingularJacobian("non-square Jacobian needs the IV-MoorePenrose flavor")
        try:
            Jinv = solve_linear(J, np.eye(q))
        except SingularMatrix as exc:
            raise SingularJacobian(str(exc)) from exc
    cov = symmetrize(Jinv @ omega @ Jinv.T / n)
    return SandwichCov(cov=cov, flavor=flavor, jacobian=J, omega=omega)


def weighted_gmm_cov(J: np.ndarray, omega: np.ndarray, W: np.ndarray, n: int) -> np.ndarray:
    """Covariance of a GMM estimator that minimized ``m' W m``.

    ``(J'WJ)^{-1} J'W Omega W J (J'WJ)^{-1} / n``; collapses to
    ``(J' Omega^{-1} J)^{-1} / n`` when ``W = Omega^{-1}`` and to the square
    sandwich when ``J`` is invertible.
    """
    bread = solve_linear(J.T @ W @ J, np.eye(J.shape[1]))
    meat = J.T @ W @ omega @ W @ J
    return symmetrize(bread @ meat @ bread / n)


def hc1_omega(g: np.ndarray) -> np.ndarray:
    """Centred covariance of per-unit moments with the ``n / (n - q)`` correction."""
    n, q = g.shape
    gc = g - g.mean(axis=0)
    return (gc.T @ gc / n) * n / (n - q)


# ---------------------------------------------------------------------------
# sampling


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """A matrix ``F`` with ``F F' = cov``.

    Cholesky first, then a clipped eigen-decomposition, so that exactly
    singular but PSD matrices (the zero matrix included) are accepted and
    reproduced without jitter.
    """
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    scale = max(float(np.max(np.abs(np.diag(cov)))), 1.0)
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() < -1e-10 * scale:
        raise NotPSD(f"covariance has eigenvalue {vals.min():.3g}")
    logger.info("mvn_sample: singular covariance, using eigen-decomposition")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def mvn_sample(mean, cov, n_draws: int, seed: int | None = None, rng=None) -> np.ndarray:
    """``n_draws x q`` multivariate-normal draws, deterministic given ``seed``."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    q = mean.size
    if cov.shape != (q, q):
        raise DimensionMismatch(f"cov shape {cov.shape} does not match mean length {q}")
    if not np.allclose(cov, cov.T, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise NotPSD("covariance is not symmetric")
    factor = _psd_factor(symmetrize(cov))
    if rng is None:
        rng = rng_new(seed)
    z = rng.standard_normal((n_draws, q))
    return mean + z @ factor.T


# ---------------------------------------------------------------------------
# derivative-free minimization


@dataclass(frozen=True)
class SimplexResult:
    x: np.ndarray
    fun: float
    converged: bool
    n_iter: int
    n_fev: int
    restarts_used: int


def _initial_simplex(x: np.ndarray, step) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if step is None:
        step = 0.1 * np.maximum(np.abs(x), 1.0)
    step = np.broadcast_to(np.asarray(step, dtype=float), x.shape)
    sim = np.tile(x, (x.size + 1, 1))
    sim[1:] += np.diag(step)
    return sim


def minimize_simplex(
    f: Callable[[np.ndarray], float],
    x0,
    max_iter: int = 5000,
    x_tol: float = 1e-10,
    f_tol: float = 1e-14,
    restarts: int = 0,
    initial_step=None,
) -> SimplexResult:
    """Nelder-Mead descent with optional restarts.

    Each restart rebuilds a fresh simplex around the incumbent and stops
    once a pass improves the objective by less than ``f_tol``. The returned
    point never has a larger objective than ``x0``.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    f0 = float(f(x0))
    if not np.isfinite(f0):
        raise NonFiniteMoment("objective is not finite at the starting point")

    opts = {"maxiter": max_iter, "maxfev": 4 * max_iter, "xatol": x_tol, "fatol": f_tol}
    best_x, best_f = x0, f0
    n_iter = n_fev = 0
    converged = False
    used = 0
    for attempt in range(restarts + 1):
        res = optimize.minimize(
            f,
            best_x,
            method="Nelder-Mead",
            options={**opts, "initial_simplex": _initial_simplex(best_x, initial_step)},
        )
        n_iter += int(res.nit)
        n_fev += int(res.nfev)
        converged = bool(res.success)
        improvement = best_f - float(res.fun)
        if float(res.fun) < best_f:
            best_x, best_f = np.asarray(res.x, dtype=float), float(res.fun)
        used = attempt
        if attempt > 0 and improvement < f_tol:
            break
    if not converged:
        logger.debug("minimize_simplex: iteration cap reached (f=%g)", best_f)
    return SimplexResult(best_x, best_f, converged, n_iter, n_fev, used)
