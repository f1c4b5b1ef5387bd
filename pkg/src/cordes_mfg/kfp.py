"""Very weak KFP solves as transposes of the nondivergence operator.

For a selection field ``abar`` the discrete operator ``L v = -abar : D^2 v``
is assembled once; the density solves ``L^T m = g`` so that
``(m, L v)_h = (g, v)_h`` for every grid field ``v``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, LinearSolverError
from .hjb import factorize

logger = logging.getLogger(__name__)

__all__ = [
    "SelectionField",
    "KfpReport",
    "solve_kfp",
    "check_nonnegativity",
    "comparison_probe",
    "duality_defect",
    "is_stencil_monotone",
    "sign_tolerance",
]

TOL_KFP = 1e-10


@dataclass(frozen=True, eq=False)
class SelectionField:
    """Per-node symmetric matrices ``abar`` with ``-abar`` in the subdifferential hull."""

    grid: object
    matrices: np.ndarray
    provenance: str = "policy"
    weights: np.ndarray | None = None

    def __post_init__(self):
        A = np.asarray(self.matrices, dtype=float)
        if A.shape != (self.grid.size, 2, 2):
            raise ContractViolation(f"selection matrices have shape {A.shape}")
        if not np.allclose(A, np.swapaxes(A, 1, 2), rtol=0, atol=1e-12 * (1 + np.abs(A).max())):
            raise ContractViolation("selection matrices must be symmetric")
        object.__setattr__(self, "matrices", A)

    @classmethod
    def from_policy(cls, coeffs, policy):
        policy = np.asarray(policy, dtype=int)
        return cls(coeffs.grid, coeffs.selected(policy), "policy")

    @classmethod
    def from_weights(cls, coeffs, weights):
        weights = np.asarray(weights, dtype=float)
        return cls(coeffs.grid, np.einsum("nk,nkij->nij", weights, coeffs.a), "weights", weights)

    @classmethod
    def constant(cls, grid, matrix):
        return cls(grid, np.broadcast_to(np.asarray(matrix, dtype=float), (grid.size, 2, 2)).copy())

    def operator(self):
        A = self.matrices
        return self.grid.nondivergence_operator(A[:, 0, 0], A[:, 0, 1], A[:, 1, 1])


@dataclass(frozen=True)
class KfpReport:
    m: np.ndarray
    adjoint_residual: float
    min_value: float
    relative_residual: float


def sign_tolerance(m) -> float:
    return 1e-8 * (1.0 + float(np.abs(m).max(initial=0.0)))


def solve_kfp(selection: SelectionField, g, tol: float = TOL_KFP) -> KfpReport:
    """Solve ``L(abar)^T m = g``; one refinement pass if the first residual is loose.

    Raises
    ------
    LinearSolverError
        Singular operator, or residual above ``tol * |g|_2`` after refinement.
    """
    grid = selection.grid
    g = grid.check_field(g, "g")
    if not np.all(np.isfinite(g)):
        raise ContractViolation("g must be finite")
    L = selection.operator()
    lu = factorize(L)
    m = lu.solve(g, trans="T")
    LT = L.T.tocsr()
    r = LT @ m - g
    gnorm = float(np.linalg.norm(g))
    if np.linalg.norm(r) > tol * gnorm:
        m = m - lu.solve(r, trans="T")
        r = LT @ m - g
    res = float(np.linalg.norm(r))
    if not np.all(np.isfinite(m)) or res > tol * gnorm:
        raise LinearSolverError(f"transpose solve residual {res:.3e} exceeds {tol:.1e} * |g|")
    return KfpReport(m, res, float(m.min()), res / gnorm if gnorm > 0 else 0.0)


def check_nonnegativity(report: KfpReport, g) -> dict:
    """``g >= 0`` implies ``min m >= -tol_sign``; vacuously true for mixed-sign ``g``."""
    g = np.asarray(g, dtype=float)
    tol = sign_tolerance(report.m)
    holds = True if np.any(g < 0) else bool(report.min_value >= -tol)
    return {"holds": holds, "min_value": report.min_value, "tol_sign": tol}


def comparison_probe(selection: SelectionField, g) -> dict:
    """Forward solve ``-abar : D^2 v = g`` and report its minimum."""
    grid = selection.grid
    g = grid.check_field(g, "g")
    if np.any(g < 0):
        raise ContractViolation("comparison probe needs g >= 0 nodewise")
    v = factorize(selection.operator()).solve(g)
    return {"v": v, "min_value": float(v.min())}


def duality_defect(selection: SelectionField, m, g, v) -> float:
    """``|(m, -abar:D^2 v)_h - (g, v)_h|``."""
    grid = selection.grid
    return abs(grid.inner_product(m, selection.operator() @ v) - grid.inner_product(g, v))


def is_stencil_monotone(selection: SelectionField) -> bool:
    """True when the assembled operator is a Z-matrix with positive diagonal.

    With the 4-point cross stencil this holds exactly when the mixed
    coefficients vanish.
    """
    L = selection.operator().tocoo()
    off = L.row != L.col
    return bool(np.all(L.data[off] <= 0) and np.all(L.diagonal() > 0))
