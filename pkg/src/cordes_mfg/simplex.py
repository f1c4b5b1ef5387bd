"""Batched Euclidean projection onto the simplex and a small concave QP solver.

The QP is the dual of the Moreau envelope of a max of affine functions::

    maximize_w  c . w - (lam / 2) |sum_k w_k G_k|^2   over the unit simplex

solved row-wise for a batch of independent problems. Accelerated projected
gradient does the bulk of the work; a KKT solve on the detected support
polishes the answer to rounding precision when the face is identified.
"""

from __future__ import annotations

import numpy as np

__all__ = ["project_simplex", "solve_dual_qp"]


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Project each row of ``v`` onto the probability simplex."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    B, K = v.shape
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    k = np.arange(1, K + 1)
    cond = u - css / k > 0
    rho = K - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(B), rho] / (rho + 1)
    return np.maximum(v - theta[:, None], 0.0)


def _objective(c, G, lam, w):
    A = np.einsum("bk,bkp->bp", w, G)
    return np.einsum("bk,bk->b", c, w) - 0.5 * lam * np.einsum("bp,bp->b", A, A), A


def _gradient(c, G, lam, A):
    return c - lam * np.einsum("bkp,bp->bk", G, A)


def _gap(c, G, lam, w):
    val, A = _objective(c, G, lam, w)
    grad = _gradient(c, G, lam, A)
    return grad.max(axis=1) - np.einsum("bk,bk->b", grad, w), val


def _kkt_candidates(c, G, lam, supports):
    """Solve the equality-constrained QP on each row's support; NaN rows when infeasible."""
    B, K = c.shape
    out = np.full((B, K), np.nan)
    patterns, inverse = np.unique(supports, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    for pid, pattern in enumerate(patterns):
        rows = np.flatnonzero(inverse == pid)
        idx = np.flatnonzero(pattern)
        s = idx.size
        if s == 0:
            continue
        Gs = G[rows][:, idx, :]
        Q = lam * np.einsum("bip,bjp->bij", Gs, Gs)
        kkt = np.zeros((rows.size, s + 1, s + 1))
        kkt[:, :s, :s] = Q
        kkt[:, :s, s] = 1.0
        kkt[:, s, :s] = 1.0
        rhs = np.concatenate([c[np.ix_(rows, idx)], np.ones((rows.size, 1))], axis=1)
        sol = np.einsum("bij,bj->bi", np.linalg.pinv(kkt), rhs)[:, :s]
        ok = np.all(sol >= -1e-13, axis=1) & np.all(np.isfinite(sol), axis=1)
        sol = np.maximum(sol, 0.0)
        sums = sol.sum(axis=1)
        ok &= sums > 0
        cand = np.zeros((rows.size, K))
        cand[:, idx] = sol / np.where(sums > 0, sums, 1.0)[:, None]
        out[rows[ok]] = cand[ok]
    return out


def _polish(c, G, lam, w, gap, val, support_tol=1e-12):
    """Try KKT solves on weight- and gradient-based supports; keep improvements."""
    _, A = _objective(c, G, lam, w)
    grad = _gradient(c, G, lam, A)
    scale = 1.0 + np.abs(grad).max(axis=1, keepdims=True)
    trials = [
        w > support_tol,
        grad >= grad.max(axis=1, keepdims=True) - 1e-9 * scale,
    ]
    for support in trials:
        cand = _kkt_candidates(c, G, lam, support)
        have = np.all(np.isfinite(cand), axis=1)
        if not np.any(have):
            continue
        cgap, cval = _gap(c[have], G[have], lam, cand[have])
        better = (cgap <= gap[have]) & (cval >= val[have] - 1e-14 * (1.0 + np.abs(val[have])))
        rows = np.flatnonzero(have)[better]
        w[rows] = cand[have][better]
        gap[rows] = cgap[better]
        val[rows] = cval[better]
    return w, gap, val


def solve_dual_qp(c, G, lam, tol=1e-10, max_iter=500, polish_every=25):
    """Maximize ``c.w - lam/2 |G^T w|^2`` over the simplex, row by row.

    Parameters
    ----------
    c : (B, K) array
        Linear coefficients (affine-piece values).
    G : (B, K, p) array
        Flattened piece gradients; ``|.|`` is the Euclidean norm over ``p``.
    lam : float
        Quadratic weight, must be positive.
    tol : float
        Rows stop once the Frank-Wolfe gap is below ``tol * (1 + |value|)``;
        the gap bounds the suboptimality of the returned value.

    Returns
    -------
    value : (B,) array
    w : (B, K) array
    gap : (B,) array
    converged : (B,) bool array
    iterations : int
    """
    c = np.atleast_2d(np.asarray(c, dtype=float))
    G = np.asarray(G, dtype=float)
    if G.ndim == 2:
        G = G[None]
    B, K = c.shape
    lam = float(lam)

    vertex_vals = c - 0.5 * lam * np.einsum("bkp,bkp->bk", G, G)
    w = np.zeros((B, K))
    w[np.arange(B), np.argmax(vertex_vals, axis=1)] = 1.0
    if K == 1:
        gap, val = _gap(c, G, lam, w)
        return val, w, gap, np.ones(B, dtype=bool), 0

    lip = lam * np.maximum(np.einsum("bkp,bkp->b", G, G), 1e-300)
    gap, val = _gap(c, G, lam, w)
    w, gap, val = _polish(c, G, lam, w, gap, val)
    done = gap <= tol * (1.0 + np.abs(val))

    y = w.copy()
    t = np.ones(B)
    it = 0
    for it in range(1, max_iter + 1):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        ca, Ga = c[act], G[act]
        _, Ay = _objective(ca, Ga, lam, y[act])
        w_new = project_simplex(y[act] + _gradient(ca, Ga, lam, Ay) / lip[act, None])
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t[act] ** 2))
        step = w_new - w[act]
        y_new = w_new + ((t[act] - 1.0) / t_new)[:, None] * step
        # gradient-based restart
        restart = np.einsum("bk,bk->b", y[act] - w_new, step) > 0
        y_new[restart] = w_new[restart]
        t_new[restart] = 1.0
        w[act], y[act], t[act] = w_new, y_new, t_new
        g_act, v_act = _gap(ca, Ga, lam, w_new)
        gap[act], val[act] = g_act, v_act
        if it % polish_every == 0:
            wp, gp, vp = _polish(ca, Ga, lam, w[act], gap[act], val[act])
            w[act], gap[act], val[act] = wp, gp, vp
            y[act] = np.where((gp < g_act)[:, None], wp, y[act])
        done = gap <= tol * (1.0 + np.abs(val))

    w, gap, val = _polish(c, G, lam, w, gap, val)
    done = gap <= tol * (1.0 + np.abs(val))
    return val, w, gap, done, it
