"""Discrete HJB solves: Howard policy iteration and an envelope Newton method.

The max-type equation ``H[u] = F`` on the grid is solved by alternating a
linear solve for a frozen policy with pointwise re-optimization. The update
is damped by halving until the sup-residual stops increasing. Setting
``renormalize=True`` optimizes the ``Tr a / |a|^2``-weighted scores instead;
the zero set, hence the solution, is unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import DomainError, LinearSolverError, SolverFailure
from .hamiltonian import NodalCoefficients, default_eta, envelope_batch

logger = logging.getLogger(__name__)

__all__ = [
    "PolicyOperator",
    "HjbReport",
    "assemble_policy_operator",
    "factorize",
    "hjb_residual",
    "solve_hjb",
    "solve_hjb_envelope",
    "hjb_stability_probe",
]

MAX_HALVINGS = 30


class PolicyOperator(NamedTuple):
    """Rows of ``-a(x, alpha):D^2`` and loads ``f(x, alpha)``, both scaled by ``scale``."""

    matrix: sp.csr_matrix
    load: np.ndarray
    scale: np.ndarray


@dataclass
class HjbReport:
    u: np.ndarray
    policy: np.ndarray
    residual_sup: float
    iterations: int
    renormalized: bool
    history: list = field(default_factory=list)
    weights: np.ndarray | None = None  # envelope solves only

    @property
    def converged(self) -> bool:
        return bool(self.history) and self.history[-1].get("converged", False)


def factorize(matrix):
    """Sparse LU that makes no symmetry assumption; raises :class:`LinearSolverError`."""
    try:
        return splu(sp.csc_matrix(matrix))
    except RuntimeError as exc:
        raise LinearSolverError(f"sparse factorization failed: {exc}") from exc


def _solve(matrix, rhs, trans="N"):
    lu = factorize(matrix)
    x = lu.solve(np.asarray(rhs, dtype=float), trans=trans)
    if not np.all(np.isfinite(x)):
        raise LinearSolverError("linear solve produced non-finite values")
    return x


def assemble_policy_operator(coeffs: NodalCoefficients, policy, renormalize: bool = False) -> PolicyOperator:
    grid = coeffs.grid
    policy = np.asarray(policy, dtype=int)
    A = coeffs.selected(policy)
    f = coeffs.f[np.arange(grid.size), policy]
    if renormalize:
        scale = coeffs.gamma()[np.arange(grid.size), policy]
    else:
        scale = np.ones(grid.size)
    L = grid.nondivergence_operator(scale * A[:, 0, 0], scale * A[:, 0, 1], scale * A[:, 1, 1])
    return PolicyOperator(L, scale * f, scale)


def hjb_residual(coeffs: NodalCoefficients, u, F, eta=None):
    """Pointwise ``H[u] - F`` together with eta-optimal masks and the lowest-index policy."""
    value, optimal, policy = coeffs.hamiltonian(coeffs.grid.hessian(u), eta)
    return value - F, optimal, policy


def _choose_policy(coeffs, u, F, renormalize, eta):
    hess = coeffs.grid.hessian(u)
    if not renormalize:
        return coeffs.hamiltonian(hess, eta)[2]
    s = coeffs.gamma() * (coeffs.scores(hess) - F[:, None])
    best = s.max(axis=1)
    slack = default_eta(best) if eta is None else eta
    return np.argmax((best[:, None] - s) <= np.broadcast_to(slack, best.shape)[:, None], axis=1)


def _damped_step(u, u_new, res_prev, theta, residual_fn):
    """Halve ``theta`` until the sup-residual does not increase; fall back to the full step."""
    t = theta
    for _ in range(MAX_HALVINGS):
        cand = (1.0 - t) * u + t * u_new
        r = residual_fn(cand)
        if r <= res_prev:
            return cand, r, t
        t *= 0.5
    cand = (1.0 - theta) * u + theta * u_new
    logger.warning("residual halving failed; taking the undamped-by-residual step")
    return cand, residual_fn(cand), theta


def solve_hjb(
    coeffs: NodalCoefficients,
    F_tilde,
    tol=None,
    max_iter: int = 200,
    theta: float = 1.0,
    renormalize: bool = False,
    u0=None,
    policy0=None,
    eta=None,
) -> HjbReport:
    """Solve ``max_k {-a_k : D^2u - f_k} = F_tilde`` by damped Howard iteration.

    Parameters
    ----------
    coeffs : NodalCoefficients
    F_tilde : (N,) array
    tol : float, optional
        Sup-norm residual target, default ``1e-9 * (1 + max|F_tilde|)``.
    theta : float in (0, 1]
        Initial damping of each policy update; halved while the residual grows.
    renormalize : bool
        Optimize the renormalized scores ``gamma_k (s_k - F)``.
    u0, policy0 : optional
        Initial guess and initial policy (otherwise derived from ``u0``).

    Raises
    ------
    SolverFailure
        ``max_iter`` exhausted; ``best`` holds ``(u, policy)``.
    LinearSolverError
        A policy system is singular.
    """
    grid = coeffs.grid
    F = grid.check_field(F_tilde, "F_tilde")
    if not (0.0 < theta <= 1.0):
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    if tol is None:
        tol = 1e-9 * (1.0 + np.abs(F).max(initial=0.0))
    u = np.zeros(grid.size) if u0 is None else grid.check_field(u0, "u0").copy()

    def sup_res(v):
        return float(np.abs(hjb_residual(coeffs, v, F, eta)[0]).max())

    if policy0 is None:
        policy = _choose_policy(coeffs, u, F, renormalize, eta)
    else:
        policy = np.asarray(policy0, dtype=int).copy()
    res = sup_res(u)
    history = []
    if res <= tol and policy0 is None:
        history.append({"iter": 0, "residual_sup": res, "policy_changes": 0, "theta": 0.0, "converged": True})
        return HjbReport(u, hjb_residual(coeffs, u, F, eta)[2], res, 0, renormalize, history)

    for it in range(1, max_iter + 1):
        op = assemble_policy_operator(coeffs, policy, renormalize)
        u_new = _solve(op.matrix, op.load + op.scale * F)
        u, res, t = _damped_step(u, u_new, res if it > 1 or policy0 is None else np.inf, theta, sup_res)
        new_policy = _choose_policy(coeffs, u, F, renormalize, eta)
        changes = int(np.count_nonzero(new_policy != policy))
        policy = new_policy
        done = res <= tol
        history.append(
            {"iter": it, "residual_sup": res, "policy_changes": changes, "theta": t, "converged": done}
        )
        logger.debug("hjb iter %d residual %.3e changes %d theta %.3g", it, res, changes, t)
        if done:
            final_policy = hjb_residual(coeffs, u, F, eta)[2]
            return HjbReport(u, final_policy, res, it, renormalize, history)
    raise SolverFailure(
        f"policy iteration did not reach {tol:.3e} in {max_iter} iterations (residual {res:.3e})",
        best=(u, policy),
        history=history,
    )


def solve_hjb_envelope(
    coeffs: NodalCoefficients,
    F_tilde,
    lam: float,
    tol=None,
    max_iter: int = 200,
    theta: float = 1.0,
    u0=None,
) -> HjbReport:
    """Newton's method for the Moreau-regularized equation ``H_lam[u] = F_tilde``.

    Each step solves ``-A : D^2 u = F + f.w + lam/2 |A|^2`` where ``A`` and
    ``w`` are the envelope's dual matrix and weights at the current Hessian.
    """
    grid = coeffs.grid
    F = grid.check_field(F_tilde, "F_tilde")
    if tol is None:
        tol = 1e-9 * (1.0 + np.abs(F).max(initial=0.0))
    u = np.zeros(grid.size) if u0 is None else grid.check_field(u0, "u0").copy()

    def evaluate(v):
        M = grid.hessian(v).matrices()
        return envelope_batch(coeffs.a, coeffs.f, M, lam)

    def sup_res(v):
        return float(np.abs(evaluate(v)[0] - F).max())

    value, grad, w, _ = evaluate(u)
    res = float(np.abs(value - F).max())
    history = [{"iter": 0, "residual_sup": res, "policy_changes": 0, "theta": 0.0, "converged": res <= tol}]
    it = 0
    while res > tol:
        it += 1
        if it > max_iter:
            raise SolverFailure(
                f"envelope Newton did not reach {tol:.3e} in {max_iter} iterations (residual {res:.3e})",
                best=(u, w),
                history=history,
            )
        A = -grad
        L = grid.nondivergence_operator(A[:, 0, 0], A[:, 0, 1], A[:, 1, 1])
        rhs = F + np.einsum("nk,nk->n", coeffs.f, w) + 0.5 * lam * np.einsum("nij,nij->n", A, A)
        u_new = _solve(L, rhs)
        old_w = w
        u, res, t = _damped_step(u, u_new, res, theta, sup_res)
        value, grad, w, _ = evaluate(u)
        changes = int(np.count_nonzero(np.argmax(w, axis=1) != np.argmax(old_w, axis=1)))
        history.append(
            {"iter": it, "residual_sup": res, "policy_changes": changes, "theta": t, "converged": res <= tol}
        )
    return HjbReport(u, np.argmax(w, axis=1), res, it, False, history, weights=w)


def hjb_stability_probe(coeffs: NodalCoefficients, F1, F2, **opts) -> float:
    """``|u1 - u2|_{H^2,h} / |F1 - F2|_{L^2,h}`` for the two HJB solutions."""
    grid = coeffs.grid
    dF = grid.l2_norm(np.asarray(F1) - np.asarray(F2))
    if dF == 0.0:
        raise DomainError("stability probe needs distinct right-hand sides")
    u1 = solve_hjb(coeffs, F1, **opts).u
    u2 = solve_hjb(coeffs, F2, **opts).u
    return grid.h2_norm(u1 - u2) / dF
