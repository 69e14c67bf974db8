"""Convex subproblem solvers.

Two workhorses: an l1-regularized least squares code solver (cyclic
coordinate descent with exact one-dimensional updates) and a projected
gradient solver for blockwise-convex quadratics over box-intersect-ball
feasible sets.  Both certify what they return: the code solver reports a
convexity-based objective gap bound that downstream surrogates use as their
approximation tolerance, and the block solver stops on a projected-gradient
residual criterion.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import BoxSet, BlockFeasibleSet, project_box, stationarity_measure
from .quadform import AveragedSurrogate, FactorQuad, QuadSurrogate

__all__ = [
    "soft_threshold",
    "solve_code_lasso",
    "solve_block_quadratic",
    "SubsolverError",
]

MAX_ITERS = 100_000
_POWER_ITERS = 50


class SubsolverError(RuntimeError):
    """Iteration cap exceeded or invalid subproblem."""


def soft_threshold(v, kappa):
    """sign(v) * max(|v| - kappa, 0), elementwise."""
    if np.any(np.asarray(kappa) < 0):
        raise ValueError("threshold must be >= 0")
    return np.sign(v) * np.maximum(np.abs(v) - kappa, 0.0)


def _code_bounds(code_set: BoxSet, r: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Broadcastable (lo, up) for an (r, d) code from a box of dim r or r*d."""
    if code_set.dim == r:
        return code_set.lower[:, None], code_set.upper[:, None]
    if code_set.dim == r * d:
        return code_set.lower.reshape(r, d), code_set.upper.reshape(r, d)
    raise ValueError(f"code box dim {code_set.dim} incompatible with ({r}, {d}) code")


def solve_code_lasso(
    X: np.ndarray,
    W: np.ndarray,
    lam: float,
    code_set: BoxSet,
    tol: float = 1e-8,
    max_iters: int = MAX_ITERS,
    H0: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Minimize ||X - W H||_F^2 + lam ||H||_1 over the code box.

    Cyclic coordinate descent over code rows, vectorized across columns; each
    one-dimensional problem is solved exactly (soft threshold, then clip).
    Returns (H, gap) where gap bounds the objective suboptimality: by
    convexity, obj(H) - min obj <= sup over the box of
    <grad_smooth(H), H - H'> + lam(||H||_1 - ||H'||_1), a separable
    piecewise-linear problem maximized at interval endpoints or zero.
    """
    X = np.asarray(X, dtype=float)
    W = np.asarray(W, dtype=float)
    if lam < 0:
        raise ValueError("lam must be >= 0")
    q, d = X.shape
    r = W.shape[1]
    if W.shape[0] != q:
        raise ValueError("W rows must match X rows")
    lo, up = _code_bounds(code_set, r, d)

    G = W.T @ W
    c = W.T @ X
    diag = np.diag(G).copy()

    if H0 is not None:
        H = np.clip(np.asarray(H0, dtype=float).copy(), lo, up)
    else:
        H = np.clip(np.zeros((r, d)), lo, up)

    half_lam = 0.5 * lam
    zero_clip = np.clip(np.zeros((r, d)), lo, up)
    for _ in range(max_iters):
        delta = 0.0
        for j in range(r):
            if diag[j] <= 0.0:
                new_j = zero_clip[j]
            else:
                resid = c[j] - G[j] @ H + diag[j] * H[j]
                new_j = np.clip(soft_threshold(resid, half_lam) / diag[j], lo[j], up[j])
            delta = max(delta, float(np.max(np.abs(new_j - H[j]), initial=0.0)))
            H[j] = new_j
        gap = _code_gap(H, G, c, lam, lo, up)
        if gap <= tol:
            return H, gap
        if delta == 0.0:
            # stalled at machine precision; the certified gap is what it is
            return H, gap
    raise SubsolverError("code solver iteration cap exceeded")


def _code_gap(H, G, c, lam, lo, up) -> float:
    """Certified objective gap bound, separable over entries."""
    grad = 2.0 * (G @ H - c)
    lo_b = np.broadcast_to(lo, H.shape)
    up_b = np.broadcast_to(up, H.shape)
    # sup over h' in [lo, up] of grad*(H - h') + lam(|H| - |h'|), per entry;
    # the objective is linear in h' on each sign region, so checking the
    # endpoints and the (clipped) zero suffices
    base = grad * H + lam * np.abs(H)
    zero = np.clip(0.0, lo_b, up_b)
    best = np.maximum(
        -grad * lo_b - lam * np.abs(lo_b),
        -grad * up_b - lam * np.abs(up_b),
    )
    best = np.maximum(best, -grad * zero - lam * np.abs(zero))
    return max(0.0, float(np.sum(base + best)))


# ---------------------------------------------------------------------------
# block quadratic solver


def _core(g):
    return g.core if isinstance(g, AveragedSurrogate) else g


def _flat_value(core, theta_flat: np.ndarray) -> float:
    if isinstance(core, FactorQuad):
        return core.value(theta_flat)
    return core.value(theta_flat)


def _smooth_flat_grad(core, theta_flat: np.ndarray) -> np.ndarray:
    if isinstance(core, FactorQuad):
        return core.grad(theta_flat).ravel()
    return core.smooth_grad(theta_flat)


def _penalty(core) -> float:
    return core.l1_lambda if isinstance(core, QuadSurrogate) else 0.0


def _block_curvature_bound(core, J: np.ndarray) -> float:
    """Upper bound on the largest Hessian eigenvalue restricted to block J."""
    if isinstance(core, FactorQuad):
        return 2.0 * float(np.linalg.eigvalsh(core.A)[-1])
    Q = core.curvature
    if not isinstance(Q, np.ndarray):
        return float(Q)
    sub = Q[np.ix_(J, J)]
    v = np.sin(np.arange(1, sub.shape[0] + 1, dtype=float)) + 1.5
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(_POWER_ITERS):
        w = sub @ v
        nrm = float(np.linalg.norm(w))
        if nrm == 0.0:
            return 0.0
        lam = max(lam, nrm)
        v = w / nrm
    return lam


def _prox_l1_box_ball(z: np.ndarray, kappa: float, feas: BlockFeasibleSet) -> np.ndarray:
    """Exact prox of kappa*||.||_1 over the box-and-ball slice.

    Dualizes the ball constraint: for multiplier mu >= 0 the box-constrained
    prox is separable with the closed form clip(soft(z + mu*c, kappa)/(1+mu)),
    and ||h(mu) - c|| is non-increasing in mu, so bisection finds the
    complementary multiplier.
    """
    box = feas.sub_box

    def h_of(mu: float) -> np.ndarray:
        return project_box(soft_threshold(z + mu * feas.center_sub, kappa) / (1.0 + mu), box)

    h = h_of(0.0)
    if math.isinf(feas.radius):
        return h
    c = feas.center_sub
    if float(np.linalg.norm(h - c)) <= feas.radius:
        return h
    mu_lo, mu_hi = 0.0, 1.0
    while float(np.linalg.norm(h_of(mu_hi) - c)) > feas.radius:
        mu_hi *= 2.0
        if mu_hi > 1e18:
            return c.copy()  # radius numerically zero
    for _ in range(200):
        mid = 0.5 * (mu_lo + mu_hi)
        if float(np.linalg.norm(h_of(mid) - c)) > feas.radius:
            mu_lo = mid
        else:
            mu_hi = mid
    return h_of(mu_hi)


def solve_block_quadratic(
    g,
    feas: BlockFeasibleSet,
    theta_init: np.ndarray,
    tol: float = 1e-8,
    max_iters: int = MAX_ITERS,
) -> np.ndarray:
    """Minimize a blockwise-convex quadratic over one block's feasible slice.

    Coordinates outside feas.J stay at feas.theta_prev.  Projected gradient
    with fixed step 1/(largest block curvature eigenvalue); stops when the
    projected-gradient residual ||theta - Proj(theta - eta*grad)|| / eta
    drops to tol (and, when there is no trust region, when the box
    stationarity of the block gradient does too).  The objective never rises
    above its value at theta_init.
    """
    core = _core(g)
    theta_init = np.asarray(theta_init, dtype=float).ravel()
    J = feas.J
    if not feas.contains(theta_init):
        raise SubsolverError("theta_init must be feasible for the block slice")

    lam_pen = _penalty(core)
    curv = _block_curvature_bound(core, J)
    eta = 1.0 / max(curv, 1e-12)

    theta = feas.theta_prev.copy()
    sub = theta_init[J].copy()
    theta[J] = sub
    obj = _flat_value(core, theta)
    scale = 1.0 + abs(obj)
    no_ball = math.isinf(feas.radius)

    for _ in range(max_iters):
        grad_sub = _smooth_flat_grad(core, theta)[J]
        z = sub - eta * grad_sub
        if lam_pen > 0:
            new = _prox_l1_box_ball(z, eta * lam_pen, feas)
        else:
            new = feas.project_sub(z)
        residual = float(np.linalg.norm(new - sub)) / eta
        sub = new
        theta[J] = sub
        new_obj = _flat_value(core, theta)
        if new_obj > obj + 1e-9 * scale:
            raise SubsolverError("projected gradient step increased the objective")
        obj = min(obj, new_obj)
        if residual <= 0.5 * tol:
            if no_ball and lam_pen == 0:
                # snap near-boundary coordinates driven outward onto the bound
                box = feas.sub_box
                gs = _smooth_flat_grad(core, theta)[J]
                snap_lo = (sub - box.lower <= eta * tol) & (gs > 0)
                snap_up = (box.upper - sub <= eta * tol) & (gs < 0)
                if snap_lo.any() or snap_up.any():
                    sub = np.where(snap_lo, box.lower, sub)
                    sub = np.where(snap_up, box.upper, sub)
                    theta[J] = sub
                    snapped_obj = _flat_value(core, theta)
                    if snapped_obj > obj + 1e-9 * scale:  # undo a bad snap
                        sub = new
                        theta[J] = sub
                    else:
                        obj = min(obj, snapped_obj)
                gs = _smooth_flat_grad(core, theta)[J]
                if stationarity_measure(gs, sub, box) > 0.5 * tol:
                    continue
            return theta
    raise SubsolverError("block quadratic solver iteration cap exceeded")
