"""Selections from the subdifferential that make a density solve the KFP equation.

Given ``(u, m, g)`` the weights ``w[p, k]`` live on the simplex of the
eta-optimal controls at node ``p``. The induced ``abar(w) = sum_k w_k a_k``
defines the residual ``r(w) = L(abar(w))^T m - g``, affine in ``w``; we
minimize ``J(w)^2 = |r(w)|_2^2`` over the product of simplices.

The minimizer is found with a fully corrective Frank-Wolfe method: each
outer iteration adds the per-node linear-minimization vertex to the active
sets and then re-minimizes exactly over the convex hull of the active
vertices (least squares on the affine hull with step-back to the boundary).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ContractViolation
from .hjb import factorize
from .kfp import SelectionField, sign_tolerance

logger = logging.getLogger(__name__)

__all__ = [
    "MinimaxReport",
    "kfp_residual",
    "optimize_selection",
    "directional_selection_check",
]

TOL_SEL = 1e-8
MAX_SEL_ITER = 2000


@dataclass
class MinimaxReport:
    weights: np.ndarray
    optimal: np.ndarray
    J_value: float
    iterations: int
    J_history: list = field(default_factory=list)
    gap: float = np.inf
    converged: bool = False
    selection: SelectionField | None = None


def _weighted(coeffs, w):
    a = coeffs.a
    return (
        np.einsum("nk,nk->n", w, a[:, :, 0, 0]),
        np.einsum("nk,nk->n", w, a[:, :, 0, 1]),
        np.einsum("nk,nk->n", w, a[:, :, 1, 1]),
    )


def _adjoint_apply(grid, m, A11, A12, A22):
    """``L(abar)^T m`` for per-node coefficients."""
    return -(grid.Dxx.T @ (A11 * m) + 2.0 * (grid.Dxy.T @ (A12 * m)) + grid.Dyy.T @ (A22 * m))


def kfp_residual(coeffs, m, g, w):
    """``r(w) = L(abar(w))^T m - g``."""
    return _adjoint_apply(coeffs.grid, m, *_weighted(coeffs, w)) - g


def _objective_gradient(coeffs, m, r):
    """d|r|^2 / dw[p, k] = 2 m_p (-a_k : D^2 r)_p."""
    h = coeffs.grid.hessian(r)
    a = coeffs.a
    lr = -(a[:, :, 0, 0] * h.xx[:, None] + 2.0 * a[:, :, 0, 1] * h.xy[:, None] + a[:, :, 1, 1] * h.yy[:, None])
    return 2.0 * m[:, None] * lr


def _corrective(coeffs, m, g, w, support, max_inner=100):
    """Minimize |r(w)| over the product of hulls of ``support``; returns new (w, support)."""
    grid = coeffs.grid
    N = grid.size
    a = coeffs.a
    r = kfp_residual(coeffs, m, g, w)
    J = np.linalg.norm(r)
    for _ in range(max_inner):
        ref = np.argmax(np.where(support, w, -1.0), axis=1)
        free = support.copy()
        free[np.arange(N), ref] = False
        nodes, ks = np.nonzero(free)
        if nodes.size == 0:
            break
        da = a[nodes, ks] - a[nodes, ref[nodes]]
        q = nodes.size
        cols = np.arange(q)

        def block(vals):
            return sp.csc_matrix((m[nodes] * vals, (nodes, cols)), shape=(N, q))

        Bm = -(grid.Dxx.T @ block(da[:, 0, 0]) + 2.0 * (grid.Dxy.T @ block(da[:, 0, 1])) + grid.Dyy.T @ block(da[:, 1, 1]))
        Bm = sp.csc_matrix(Bm)
        norms = np.sqrt(np.asarray(Bm.multiply(Bm).sum(axis=0)).ravel())
        keep = norms > 1e-13 * max(norms.max(initial=0.0), 1e-300)
        if not np.any(keep):
            break
        Bm = Bm[:, keep]
        nodes_k, ks_k = nodes[keep], ks[keep]
        qk = Bm.shape[1]
        eps = 1e-13 * norms[keep].max() ** 2
        # quasi-definite augmented system for min |r + B d|^2 + eps |d|^2
        aug = sp.bmat([[sp.identity(N), -Bm], [Bm.T, eps * sp.identity(qk)]], format="csc")
        lu = factorize(aug)
        rhs = np.concatenate([r, np.zeros(qk)])
        sol = lu.solve(rhs)
        # one step of iterative refinement
        sol += lu.solve(rhs - aug @ sol)
        delta = sol[N:]
        dw = np.zeros_like(w)
        np.add.at(dw, (nodes_k, ks_k), delta)
        np.add.at(dw, (nodes_k, ref[nodes_k]), -delta)
        w_try = w + dw
        neg = support & (w_try < -1e-15)
        if not np.any(neg):
            w_new = np.where(support, np.maximum(w_try, 0.0), 0.0)
            w_new /= w_new.sum(axis=1, keepdims=True)
            r_new = kfp_residual(coeffs, m, g, w_new)
            if np.linalg.norm(r_new) <= J:
                w = w_new
                support = support & (w > 0)
                support[np.arange(N), np.argmax(w, axis=1)] = True
            break
        blocking = neg & (w <= 1e-15)
        if np.any(blocking):
            # vertices entering with a negative weight leave the active set
            support = support & ~blocking
            continue
        tau = float(np.min(w[neg] / (w[neg] - w_try[neg])))
        w_new = np.maximum(w + tau * dw, 0.0)
        w_new[w_new <= 1e-15] = 0.0
        w_new /= w_new.sum(axis=1, keepdims=True)
        r_new = kfp_residual(coeffs, m, g, w_new)
        J_new = np.linalg.norm(r_new)
        if J_new > J * (1 + 1e-12) + 1e-300:
            break
        w, r, J = w_new, r_new, J_new
        support = support & (w > 0)
        support[np.arange(N), np.argmax(w, axis=1)] = True
    return w, support


def optimize_selection(
    coeffs,
    u,
    m,
    g,
    eta=None,
    tol_sel: float = TOL_SEL,
    max_iter: int = MAX_SEL_ITER,
    initial_policy=None,
) -> MinimaxReport:
    """Minimize the KFP residual over per-node convex weights of eta-optimal controls.

    Stops at the first iterate with ``J <= tol_sel * |g|_2`` or with Frank-Wolfe
    gap ``<= tol_sel * |g|_2^2``; otherwise returns the best iterate after
    ``max_iter`` outer iterations with ``converged=False``. A large final ``J``
    means no selection makes ``(u, m)`` a PDI solution at this tolerance.
    """
    grid = coeffs.grid
    u = grid.check_field(u, "u")
    m = grid.check_field(m, "m")
    g = grid.check_field(g, "g")
    if m.min(initial=0.0) < -sign_tolerance(m):
        raise ContractViolation(f"density must be nonnegative (min {m.min():.3e})")
    N, K = grid.size, coeffs.K
    _, optimal, policy = coeffs.hamiltonian(grid.hessian(u), eta)
    start = policy.copy()
    if initial_policy is not None:
        init = np.asarray(initial_policy, dtype=int)
        ok = optimal[np.arange(N), init]
        start[ok] = init[ok]
    w = np.zeros((N, K))
    w[np.arange(N), start] = 1.0
    support = w > 0
    gnorm = float(np.linalg.norm(g))
    target_J = tol_sel * gnorm
    target_gap = tol_sel * gnorm**2

    history = []
    gap = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        r = kfp_residual(coeffs, m, g, w)
        J = float(np.linalg.norm(r))
        history.append(J)
        if J <= target_J:
            converged = True
            break
        grad = _objective_gradient(coeffs, m, r)
        masked = np.where(optimal, grad, np.inf)
        s = np.argmin(masked, axis=1)
        gap = float(np.einsum("nk,nk->", grad, w) - masked[np.arange(N), s].sum())
        if gap <= target_gap:
            converged = True
            break
        before = support.copy()
        support[np.arange(N), s] = True
        w_new, support = _corrective(coeffs, m, g, w, support)
        J_new = float(np.linalg.norm(kfp_residual(coeffs, m, g, w_new)))
        stalled = J_new >= J * (1 - 1e-14) and np.array_equal(before, support)
        w = w_new
        if stalled:
            history.append(J_new)
            logger.info("selection stalled at J=%.3e gap=%.3e", J_new, gap)
            break

    J = float(np.linalg.norm(kfp_residual(coeffs, m, g, w)))
    if history[-1] != J:
        history.append(J)
    sel = SelectionField.from_weights(coeffs, w)
    return MinimaxReport(w, optimal, J, it, history, gap, converged, sel)


def directional_selection_check(coeffs, u, m, g, v, eta=None, rtol: float = 1e-8) -> dict:
    """Bracket ``(g, v)_h`` between the extreme values of ``(m, -abar:D^2 v)_h``.

    The extremes are separable: each node contributes the min or max over its
    eta-optimal vertices of ``h^2 m_p (-a_k : D^2 v)_p``.
    """
    grid = coeffs.grid
    m = grid.check_field(m, "m")
    if m.min(initial=0.0) < -sign_tolerance(m):
        raise ContractViolation(f"density must be nonnegative (min {m.min():.3e})")
    _, optimal, _ = coeffs.hamiltonian(grid.hessian(u), eta)
    hv = grid.hessian(v)
    a = coeffs.a
    lv = -(a[:, :, 0, 0] * hv.xx[:, None] + 2.0 * a[:, :, 0, 1] * hv.xy[:, None] + a[:, :, 1, 1] * hv.yy[:, None])
    score = grid.cell_area * m[:, None] * lv
    lower = float(np.where(optimal, score, np.inf).min(axis=1).sum())
    upper = float(np.where(optimal, score, -np.inf).max(axis=1).sum())
    gv = grid.inner_product(g, v)
    tol = rtol * (1.0 + float(np.abs(score).max(axis=1).sum()) + abs(gv))
    return {
        "lower": lower,
        "upper": upper,
        "pairing": gv,
        "feasible": bool(lower - tol <= gv <= upper + tol),
        "tol": tol,
    }
