import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sbmm.geometry import BoxSet, restricted_block_set, stationarity_measure
from sbmm.quadform import FactorQuad, QuadSurrogate, make_prox_surrogate
from sbmm.subsolver import (
    SubsolverError,
    soft_threshold,
    solve_block_quadratic,
    solve_code_lasso,
)


# ---------------------------------------------------------------------------
# oracles


def lasso_objective(X, W, H, lam):
    return float(np.sum((X - W @ H) ** 2)) + lam * float(np.abs(H).sum())


def grid_min_lasso_1d(X, W, lam, lo, up, n=200_001):
    """Dense scan of the scalar code problem."""
    hs = np.linspace(lo, up, n)
    vals = (X[0, 0] - W[0, 0] * hs) ** 2 + lam * np.abs(hs)
    i = int(np.argmin(vals))
    return hs[i], float(vals[i])


def grid_min_quad_2d(g, box, n=1001, center=None, radius=math.inf):
    """Dense 2-D scan of a quadratic surrogate over box (optionally cut by
    a ball), evaluated in closed form over the whole grid at once."""
    xs = np.linspace(box.lower[0], box.upper[0], n)
    ys = np.linspace(box.lower[1], box.upper[1], n)
    XX, YY = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([XX.ravel(), YY.ravel()], axis=1)
    if not math.isinf(radius):
        keep = np.linalg.norm(pts - center[None, :], axis=1) <= radius
        pts = pts[keep]
    Q = g.curvature_matrix()
    vals = 0.5 * np.einsum("ij,jk,ik->i", pts, Q, pts) + pts @ g.linear + g.constant
    if g.l1_lambda > 0:
        vals = vals + g.l1_lambda * np.abs(pts).sum(axis=1)
    i = int(np.argmin(vals))
    return pts[i], float(vals[i])


# ---------------------------------------------------------------------------
# soft_threshold


def test_soft_threshold_identities():
    assert soft_threshold(0.3, 0.5) == 0.0
    assert soft_threshold(1.5, 0.5) == pytest.approx(1.0)
    assert soft_threshold(-1.5, 0.5) == pytest.approx(-1.0)
    np.testing.assert_allclose(
        soft_threshold(np.array([-2.0, -0.1, 0.0, 0.1, 2.0]), 0.25),
        np.array([-1.75, 0.0, 0.0, 0.0, 1.75]))


def test_soft_threshold_zero_kappa_is_identity():
    v = np.array([-1.0, 0.0, 2.5])
    np.testing.assert_array_equal(soft_threshold(v, 0.0), v)


def test_soft_threshold_rejects_negative_kappa():
    with pytest.raises(ValueError):
        soft_threshold(1.0, -0.1)


@given(st.floats(-10, 10), st.floats(0, 5))
@settings(max_examples=100, deadline=None)
def test_soft_threshold_is_l1_prox(v, kappa):
    # prox property: s = soft(v, kappa) minimizes 0.5 (x - v)^2 + kappa |x|
    s = float(soft_threshold(v, kappa))
    obj = lambda x: 0.5 * (x - v) ** 2 + kappa * abs(x)
    for x in np.linspace(v - 2 * kappa - 1, v + 2 * kappa + 1, 101):
        assert obj(s) <= obj(float(x)) + 1e-12


# ---------------------------------------------------------------------------
# solve_code_lasso


def test_code_lasso_scalar_analytic():
    # min (1 - h)^2 + 0.4 |h| over [-5, 5]: h = soft(1, 0.2) = 0.8
    X = np.array([[1.0]])
    W = np.array([[1.0]])
    H, gap = solve_code_lasso(X, W, 0.4, BoxSet.uniform(1, -5.0, 5.0), tol=1e-12)
    assert H[0, 0] == pytest.approx(0.8, abs=1e-9)
    assert 0.0 <= gap <= 1e-12


def test_code_lasso_scalar_matches_grid():
    rng = np.random.default_rng(0)
    for _ in range(50):
        X = rng.normal(size=(1, 1)) * 2.0
        W = np.array([[rng.uniform(0.2, 2.0)]])
        lam = float(rng.uniform(0.0, 1.0))
        lo, up = sorted(rng.uniform(-3.0, 3.0, size=2))
        box = BoxSet(lower=np.array([lo]), upper=np.array([up]))
        H, _ = solve_code_lasso(X, W, lam, box, tol=1e-12)
        h_star, v_star = grid_min_lasso_1d(X, W, lam, lo, up)
        assert lasso_objective(X, W, H, lam) <= v_star + 1e-8
        assert abs(H[0, 0] - h_star) <= 1e-4


def test_code_lasso_identity_dictionary_no_penalty():
    # W = I, lam = 0: H is X clipped into the box
    rng = np.random.default_rng(1)
    X = rng.normal(size=(3, 4)) * 2.0
    box = BoxSet.uniform(3, -1.0, 1.0)
    H, gap = solve_code_lasso(X, np.eye(3), 0.0, box, tol=1e-12)
    np.testing.assert_allclose(H, np.clip(X, -1.0, 1.0), atol=1e-9)
    assert gap <= 1e-12


def test_code_lasso_large_penalty_gives_zero():
    # KKT: if lam/2 >= max |(W^T X)_ij| the zero code is optimal
    rng = np.random.default_rng(2)
    X = rng.random(size=(4, 3))
    W = rng.random(size=(4, 2))
    lam = 2.0 * float(np.abs(W.T @ X).max()) + 0.1
    H, gap = solve_code_lasso(X, W, lam, BoxSet.uniform(2, -2.0, 2.0), tol=1e-12)
    np.testing.assert_allclose(H, 0.0, atol=1e-10)
    assert gap <= 1e-12


def test_code_lasso_nonneg_box_active():
    # strongly negative correlation with a nonnegative box pins the code at 0
    X = -np.ones((2, 2))
    W = np.ones((2, 1))
    H, _ = solve_code_lasso(X, W, 0.0, BoxSet.nonneg(1, upper=3.0), tol=1e-12)
    np.testing.assert_allclose(H, 0.0, atol=1e-12)


def test_code_lasso_gap_certifies_suboptimality():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(3, 1))
    W = rng.normal(size=(3, 2))
    box = BoxSet.uniform(2, -1.5, 1.5)
    lam = 0.3
    # loose tolerance so the returned gap is not tiny
    H, gap = solve_code_lasso(X, W, lam, box, tol=1e-2)
    assert gap > 0.0
    # dense 2-D brute force reference for the single-column code
    hs = np.linspace(-1.5, 1.5, 1501)
    HA, HB = np.meshgrid(hs, hs, indexing="ij")
    resid = X[:, 0][None, None, :] - (HA[..., None] * W[:, 0] + HB[..., None] * W[:, 1])
    vals = np.sum(resid ** 2, axis=-1) + lam * (np.abs(HA) + np.abs(HB))
    best = float(vals.min())
    assert lasso_objective(X, W, H, lam) - best <= gap + 1e-5


def test_code_lasso_warm_start_and_validation():
    X = np.ones((2, 2))
    W = np.ones((2, 1))
    box = BoxSet.uniform(1, 0.0, 2.0)
    H, _ = solve_code_lasso(X, W, 0.0, box, H0=np.array([[5.0, -3.0]]), tol=1e-12)
    assert np.all(H >= 0.0) and np.all(H <= 2.0)
    with pytest.raises(ValueError):
        solve_code_lasso(X, W, -0.5, box)
    with pytest.raises(ValueError):
        solve_code_lasso(X, np.ones((3, 1)), 0.0, box)
    with pytest.raises(ValueError):
        solve_code_lasso(X, W, 0.0, BoxSet.uniform(5, 0.0, 1.0))


def test_code_lasso_full_entry_box():
    # a box of dimension r*d constrains each code entry separately
    X = np.array([[2.0, -2.0]])
    W = np.array([[1.0]])
    box = BoxSet(lower=np.array([0.0, -0.5]), upper=np.array([0.5, 0.0]))
    H, _ = solve_code_lasso(X, W, 0.0, box, tol=1e-12)
    np.testing.assert_allclose(H, np.array([[0.5, -0.5]]), atol=1e-9)


# ---------------------------------------------------------------------------
# solve_block_quadratic


def _quad(curv, linear, rho=0.0, l1=0.0):
    linear = np.asarray(linear, dtype=float)
    return QuadSurrogate(curvature=curv, linear=linear, constant=0.0,
                         anchor=np.zeros(linear.size), L=1.0, rho=rho,
                         l1_lambda=l1)


def test_block_quadratic_interior_analytic():
    # min 0.5*2*||t||^2 + b't over a big box: t = -b/2
    b = np.array([1.0, -3.0])
    g = _quad(2.0, b)
    feas = restricted_block_set(BoxSet.uniform(2, -10.0, 10.0),
                                np.zeros(2), np.array([0, 1]), math.inf)
    theta = solve_block_quadratic(g, feas, np.zeros(2), tol=1e-10)
    np.testing.assert_allclose(theta, -b / 2.0, atol=1e-8)


def test_block_quadratic_matches_grid_box_only():
    rng = np.random.default_rng(4)
    for t in range(50):
        M = rng.normal(size=(2, 2))
        Q = M @ M.T + 0.2 * np.eye(2)
        b = rng.normal(size=2)
        g = _quad(Q, b)
        lo = rng.uniform(-2.0, -0.5, size=2)
        up = rng.uniform(0.5, 2.0, size=2)
        box = BoxSet(lower=lo, upper=up)
        start = np.clip(rng.normal(size=2), lo, up)
        feas = restricted_block_set(box, start, np.array([0, 1]), math.inf)
        theta = solve_block_quadratic(g, feas, start, tol=1e-10)
        p_star, v_star = grid_min_quad_2d(g, box)
        assert g.value(theta) <= v_star + 1e-8
        # location agreement up to the grid pitch (box width / 1000)
        pitch = float(np.max(up - lo)) / 1000.0
        assert np.linalg.norm(theta - p_star) <= 2.0 * pitch


def test_block_quadratic_matches_grid_with_ball():
    rng = np.random.default_rng(5)
    for t in range(15):
        M = rng.normal(size=(2, 2))
        Q = M @ M.T + 0.2 * np.eye(2)
        b = rng.normal(size=2) * 2.0
        g = _quad(Q, b)
        box = BoxSet.uniform(2, -2.0, 2.0)
        start = np.clip(rng.normal(size=2), -2.0, 2.0)
        radius = float(rng.uniform(0.2, 1.0))
        feas = restricted_block_set(box, start, np.array([0, 1]), radius)
        theta = solve_block_quadratic(g, feas, start, tol=1e-10)
        assert np.linalg.norm(theta - start) <= radius + 1e-8
        _, v_star = grid_min_quad_2d(g, box, center=start, radius=radius)
        assert g.value(theta) <= v_star + 1e-6


def test_block_quadratic_l1_prox_matches_grid():
    rng = np.random.default_rng(6)
    for t in range(10):
        Q = np.diag(rng.uniform(0.5, 3.0, size=2))
        b = rng.normal(size=2)
        g = _quad(Q, b, l1=0.5)
        box = BoxSet.uniform(2, -1.5, 1.5)
        start = np.clip(rng.normal(size=2), -1.5, 1.5)
        radius = float(rng.uniform(0.3, 2.0))
        feas = restricted_block_set(box, start, np.array([0, 1]), radius)
        theta = solve_block_quadratic(g, feas, start, tol=1e-10)
        assert np.linalg.norm(theta - start) <= radius + 1e-8
        _, v_star = grid_min_quad_2d(g, box, n=801, center=start,
                                     radius=radius)
        assert g.value(theta) <= v_star + 1e-5


def test_block_quadratic_freezes_complement():
    rng = np.random.default_rng(7)
    Q = np.eye(4) * 2.0
    b = rng.normal(size=4)
    g = _quad(Q, b)
    box = BoxSet.uniform(4, -5.0, 5.0)
    prev = np.clip(rng.normal(size=4), -5.0, 5.0)
    J = np.array([1, 3])
    feas = restricted_block_set(box, prev, J, math.inf)
    theta = solve_block_quadratic(g, feas, prev, tol=1e-10)
    np.testing.assert_array_equal(theta[[0, 2]], prev[[0, 2]])
    # the free coordinates reach the unconstrained optimum of the slice
    np.testing.assert_allclose(theta[J], -b[J] / 2.0, atol=1e-8)


def test_block_quadratic_monotone_descent():
    rng = np.random.default_rng(8)
    for _ in range(20):
        M = rng.normal(size=(3, 3))
        Q = M @ M.T
        g = _quad(Q, rng.normal(size=3))
        box = BoxSet.uniform(3, -1.0, 1.0)
        start = np.clip(rng.normal(size=3), -1.0, 1.0)
        feas = restricted_block_set(box, start, np.arange(3),
                                    float(rng.uniform(0.1, 2.0)))
        theta = solve_block_quadratic(g, feas, start, tol=1e-8)
        assert g.value(theta) <= g.value(start) + 1e-12


def test_block_quadratic_second_order_growth():
    # exact minimizer over a convex set with rho-strong convexity:
    # g(theta) >= g(theta_hat) + (rho/2) ||theta - theta_hat||^2
    rng = np.random.default_rng(9)
    rho = 0.8
    Q = np.array([[2.0, 0.3], [0.3, 1.0]])  # min eig > rho
    g = _quad(Q, rng.normal(size=2), rho=rho)
    box = BoxSet.uniform(2, -1.0, 1.0)
    start = np.zeros(2)
    feas = restricted_block_set(box, start, np.array([0, 1]), math.inf)
    theta_hat = solve_block_quadratic(g, feas, start, tol=1e-12)
    scale = 1.0 + abs(g.value(theta_hat))
    for _ in range(50):
        theta = np.clip(rng.normal(size=2), -1.0, 1.0)
        lhs = g.value(theta) - g.value(theta_hat)
        rhs = 0.5 * rho * float(np.sum((theta - theta_hat) ** 2))
        assert lhs >= rhs - 1e-8 * scale


def test_block_quadratic_stationarity_at_solution():
    rng = np.random.default_rng(10)
    for _ in range(10):
        M = rng.normal(size=(3, 3))
        Q = M @ M.T + 0.1 * np.eye(3)
        g = _quad(Q, rng.normal(size=3) * 2.0)
        box = BoxSet.uniform(3, -0.5, 0.5)
        start = np.clip(rng.normal(size=3), -0.5, 0.5)
        feas = restricted_block_set(box, start, np.arange(3), math.inf)
        tol = 1e-8
        theta = solve_block_quadratic(g, feas, start, tol=tol)
        assert stationarity_measure(g.smooth_grad(theta), theta, box) <= tol


def test_block_quadratic_factor_form():
    rng = np.random.default_rng(11)
    r, q = 2, 3
    M = rng.normal(size=(r, r))
    A = M @ M.T + 0.1 * np.eye(r)
    B = rng.normal(size=(r, q))
    W0 = np.clip(rng.normal(size=(q, r)), 0.0, 1.0)
    g = FactorQuad(A=A, B=B, C=0.0, anchor=W0, L=1.0, rho=0.0)
    box = BoxSet.nonneg(q * r, upper=1.0)
    feas = restricted_block_set(box, W0.ravel(), np.arange(q * r), math.inf)
    theta = solve_block_quadratic(g, feas, W0.ravel(), tol=1e-10)
    W = theta.reshape(q, r)
    # KKT over the box: gradient nonneg where pinned low, nonpos where pinned
    # high, ~zero in the interior
    G = g.grad(W)
    interior = (W > 1e-7) & (W < 1.0 - 1e-7)
    assert np.all(np.abs(G[interior]) <= 1e-6)
    assert np.all(G[W <= 1e-7] >= -1e-6)
    assert np.all(G[W >= 1.0 - 1e-7] <= 1e-6)


def test_block_quadratic_rejects_infeasible_start():
    g = _quad(1.0, np.zeros(2))
    feas = restricted_block_set(BoxSet.uniform(2, 0.0, 1.0),
                                np.zeros(2), np.array([0, 1]), 0.1)
    with pytest.raises(SubsolverError):
        solve_block_quadratic(g, feas, np.array([0.9, 0.9]))


def test_block_quadratic_zero_radius_returns_start():
    g = _quad(1.0, np.array([5.0, 5.0]))
    start = np.array([0.5, 0.5])
    feas = restricted_block_set(BoxSet.uniform(2, 0.0, 1.0), start,
                                np.array([0, 1]), 1e-30)
    theta = solve_block_quadratic(g, feas, start, tol=1e-8)
    np.testing.assert_allclose(theta, start, atol=1e-12)
