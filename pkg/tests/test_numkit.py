import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from longicausal.errors import NotPSD, RankDeficient, SingularMatrix
from longicausal.numkit import (
    fd_jacobian,
    gmm_sandwich,
    minimize_simplex,
    mvn_sample,
    ols_residuals,
    solve_linear,
    weighted_gmm_cov,
    wls_fit,
)


def hc1_by_hand(X, y):
    """Textbook HC1 for OLS, written independently of the library."""
    n, p = X.shape
    XtX_inv = np.linalg.inv(X.T @ X)
    b = XtX_inv @ X.T @ y
    e = y - X @ b
    meat = sum(np.outer(X[i], X[i]) * e[i] ** 2 for i in range(n))
    return b, n / (n - p) * XtX_inv @ meat @ XtX_inv


@pytest.fixture
def ten_rows():
    X = np.column_stack([np.ones(10), np.arange(10.0), np.array([1, 0, 2, 1, 3, 0, 1, 2, 0, 1.0])])
    y = np.array([0.3, 1.1, 2.9, 3.2, 5.5, 4.9, 6.8, 8.1, 7.7, 9.6])
    return X, y


class TestWls:
    def test_unweighted_mean(self):
        assert wls_fit([[1], [1]], [2, 4], [1, 1]).coef == pytest.approx([3.0])

    def test_weighted_mean(self):
        assert wls_fit([[1], [1]], [2, 4], [3, 1]).coef == pytest.approx([2.5])

    def test_exact_line(self):
        fit = wls_fit([[1, 0], [1, 1], [1, 2]], [0, 1, 2], np.ones(3))
        np.testing.assert_allclose(fit.coef, [0, 1], atol=1e-12)

    def test_rank_deficiency_names_columns(self):
        X = np.column_stack([np.ones(5), np.arange(5.0), 2 * np.arange(5.0)])
        with pytest.raises(RankDeficient) as info:
            wls_fit(X, np.arange(5.0), names=["const", "a", "b"])
        assert info.value.columns and set(info.value.columns) <= {"a", "b"}

    @given(st.integers(min_value=0, max_value=10_000))
    def test_residual_orthogonality(self, seed):
        rng = np.random.default_rng(seed)
        n = 40
        X = np.column_stack([np.ones(n), rng.normal(size=(n, 3))])
        y = rng.normal(size=n)
        w = rng.uniform(0.1, 5.0, size=n)
        fit = wls_fit(X, y, w)
        assert np.max(np.abs(X.T @ (w * fit.residuals))) < 1e-8

    def test_ols_residuals_match_fit(self, ten_rows):
        X, y = ten_rows
        np.testing.assert_allclose(ols_residuals(X, y), wls_fit(X, y).residuals, atol=1e-12)


class TestSandwich:
    def test_hc1_matches_direct_formula(self, ten_rows):
        X, y = ten_rows
        b, oracle = hc1_by_hand(X, y)
        sand = gmm_sandwich(lambda th: X * (y - X @ th)[:, None], b, jacobian=-X.T @ X / len(y))
        np.testing.assert_allclose(sand.cov, oracle, atol=1e-8, rtol=0)

    def test_fd_jacobian_path_agrees(self, ten_rows):
        X, y = ten_rows
        b, oracle = hc1_by_hand(X, y)
        sand = gmm_sandwich(lambda th: X * (y - X @ th)[:, None], b)
        np.testing.assert_allclose(sand.cov, oracle, atol=1e-8, rtol=0)

    def test_identical_moments_give_zero_cov(self):
        g = lambda th: np.tile([1.0, -2.0], (20, 1)) - th
        sand = gmm_sandwich(g, np.zeros(2), jacobian=-np.eye(2))
        np.testing.assert_array_equal(sand.cov, np.zeros((2, 2)))

    @given(st.integers(min_value=0, max_value=10_000))
    def test_linear_moments_jacobian(self, seed):
        rng = np.random.default_rng(seed)
        n, q = 50, 3
        D = rng.normal(size=(n, q, q))
        base = rng.normal(size=(n, q))
        mean_fn = lambda th: (base - np.einsum("imp,p->im", D, th)).mean(axis=0)
        theta = rng.normal(size=q)
        np.testing.assert_allclose(fd_jacobian(mean_fn, theta), -D.mean(axis=0), atol=1e-6)

    def test_weighted_gmm_reduces_to_square_sandwich(self, rng):
        J = rng.normal(size=(3, 3))
        B = rng.normal(size=(3, 3))
        omega = B @ B.T
        W = np.diag([1.0, 2.0, 3.0])
        Jinv = np.linalg.inv(J)
        np.testing.assert_allclose(weighted_gmm_cov(J, omega, W, 10), Jinv @ omega @ Jinv.T / 10, atol=1e-10)

    def test_moore_penrose_flavor_accepts_nonsquare(self, rng):
        x = rng.normal(size=200)
        sand = gmm_sandwich(lambda th: np.column_stack([x - th[0], x**2 - 1 - th[0] * 0]), np.array([x.mean()]), flavor="IV-MoorePenrose")
        assert sand.cov.shape == (1, 1)


class TestLinalg:
    def test_singular_refused(self):
        with pytest.raises(SingularMatrix):
            solve_linear([[1.0, 2.0], [2.0, 4.0]], [1.0, 2.0])

    def test_solve(self):
        np.testing.assert_allclose(solve_linear([[2.0, 0.0], [0.0, 4.0]], [2.0, 2.0]), [1.0, 0.5])


class TestMvn:
    def test_zero_cov_returns_mean(self):
        draws = mvn_sample([1.0, -2.0], np.zeros((2, 2)), 50, seed=3)
        np.testing.assert_array_equal(draws, np.tile([1.0, -2.0], (50, 1)))

    def test_unit_sd(self):
        draws = mvn_sample([0.0], [[1.0]], 100_000, seed=5)
        assert abs(draws.std(ddof=1) - 1.0) <= 0.02

    def test_deterministic(self):
        cov = np.array([[2.0, 0.3], [0.3, 1.0]])
        np.testing.assert_array_equal(mvn_sample([0, 0], cov, 10, seed=9), mvn_sample([0, 0], cov, 10, seed=9))

    def test_indefinite_rejected(self):
        with pytest.raises(NotPSD):
            mvn_sample([0, 0], [[1.0, 2.0], [2.0, 1.0]], 5, seed=0)


class TestSimplex:
    def test_quadratic(self):
        res = minimize_simplex(lambda x: float((x[0] - 3.0) ** 2), [0.0])
        assert res.x[0] == pytest.approx(3.0, abs=1e-6)

    def test_rosenbrock(self):
        rosen = lambda x: float(100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2)
        res = minimize_simplex(rosen, [-1.2, 1.0], restarts=2)
        assert res.fun < 1e-8
        np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-3)

    def test_flat_objective_stays_put(self):
        res = minimize_simplex(lambda x: 1.0, [0.5, -0.5])
        assert res.converged
        np.testing.assert_array_equal(res.x, [0.5, -0.5])
