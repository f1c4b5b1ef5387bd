"""Uniform rectangular grids with homogeneous Dirichlet finite differences.

Only interior nodes are stored. Node ``(i, j)`` sits at
``(x_min + (i + 1) * hx, y_min + (j + 1) * hy)`` and has flat index
``i * n + j`` (row-major, ``i`` along x). Every stencil treats values outside
the box as zero, which is how the boundary condition enters.

A grid field is a plain 1-D float array of length ``grid.size``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import ContractViolation

__all__ = ["Grid", "HessianField"]


def _second_difference(n):
    return sp.diags([np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1], format="csr")


def _central_difference(n):
    # (u[i+1] - u[i-1]) / 2, zero ghosts
    return sp.diags([-0.5 * np.ones(n - 1), 0.5 * np.ones(n - 1)], [-1, 1], format="csr")


@dataclass(frozen=True)
class HessianField:
    """Per-node symmetric 2x2 Hessians, stored as the three distinct entries."""

    xx: np.ndarray
    xy: np.ndarray
    yy: np.ndarray

    def matrices(self) -> np.ndarray:
        """Return an ``(N, 2, 2)`` array of the nodal matrices."""
        out = np.empty((self.xx.size, 2, 2))
        out[:, 0, 0] = self.xx
        out[:, 0, 1] = self.xy
        out[:, 1, 0] = self.xy
        out[:, 1, 1] = self.yy
        return out

    def frobenius_sq(self) -> np.ndarray:
        return self.xx**2 + 2.0 * self.xy**2 + self.yy**2

    def trace(self) -> np.ndarray:
        return self.xx + self.yy


@dataclass(frozen=True, eq=False)
class Grid:
    """Interior nodes of a uniform grid on ``[x_min, x_max] x [y_min, y_max]``.

    Parameters
    ----------
    n : int
        Interior nodes per dimension.
    box : tuple of float
        ``(x_min, x_max, y_min, y_max)``.
    """

    n: int
    box: tuple = (0.0, 1.0, 0.0, 1.0)

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ContractViolation(f"n_interior must be a positive integer, got {self.n!r}")
        x0, x1, y0, y1 = (float(b) for b in self.box)
        if not (x1 > x0 and y1 > y0):
            raise ContractViolation(f"degenerate box {self.box!r}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "box", (x0, x1, y0, y1))

    @property
    def size(self) -> int:
        return self.n * self.n

    @property
    def hx(self) -> float:
        return (self.box[1] - self.box[0]) / (self.n + 1)

    @property
    def hy(self) -> float:
        return (self.box[3] - self.box[2]) / (self.n + 1)

    @property
    def h(self) -> float:
        """Spacing; only meaningful as a single number on square cells."""
        return max(self.hx, self.hy)

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    def same_as(self, other: "Grid") -> bool:
        return self.n == other.n and self.box == other.box

    @cached_property
    def x(self) -> np.ndarray:
        return self.box[0] + self.hx * np.arange(1, self.n + 1)

    @cached_property
    def y(self) -> np.ndarray:
        return self.box[2] + self.hy * np.arange(1, self.n + 1)

    @cached_property
    def points(self) -> np.ndarray:
        """``(N, 2)`` node coordinates in flat-index order."""
        X, Y = np.meshgrid(self.x, self.y, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])

    @cached_property
    def indices(self) -> np.ndarray:
        """``(N, 2)`` integer ``(i, j)`` pairs in flat-index order."""
        I, J = np.meshgrid(np.arange(self.n), np.arange(self.n), indexing="ij")
        return np.column_stack([I.ravel(), J.ravel()])

    def sample(self, fn) -> np.ndarray:
        """Evaluate ``fn(x, y)`` (vectorized) at the interior nodes."""
        pts = self.points
        return np.asarray(fn(pts[:, 0], pts[:, 1]), dtype=float) * np.ones(self.size)

    def check_field(self, u, name="field") -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.size,):
            raise ContractViolation(
                f"{name} has shape {u.shape}, grid expects ({self.size},)"
            )
        return u

    # -- stencils ---------------------------------------------------------

    @cached_property
    def Dxx(self) -> sp.csr_matrix:
        return (sp.kron(_second_difference(self.n), sp.identity(self.n)) / self.hx**2).tocsr()

    @cached_property
    def Dyy(self) -> sp.csr_matrix:
        return (sp.kron(sp.identity(self.n), _second_difference(self.n)) / self.hy**2).tocsr()

    @cached_property
    def Dxy(self) -> sp.csr_matrix:
        C = _central_difference(self.n)
        return (sp.kron(C, C) / (self.hx * self.hy)).tocsr()

    @cached_property
    def Dx(self) -> sp.csr_matrix:
        return (sp.kron(_central_difference(self.n), sp.identity(self.n)) / self.hx).tocsr()

    @cached_property
    def Dy(self) -> sp.csr_matrix:
        return (sp.kron(sp.identity(self.n), _central_difference(self.n)) / self.hy).tocsr()

    @cached_property
    def laplacian(self) -> sp.csr_matrix:
        """Five-point Laplacian (the trace of :meth:`hessian`)."""
        return (self.Dxx + self.Dyy).tocsr()

    def hessian(self, u) -> HessianField:
        """Second-order Hessian with the 4-point cross stencil for the mixed term."""
        u = self.check_field(u, "u")
        return HessianField(self.Dxx @ u, self.Dxy @ u, self.Dyy @ u)

    def nondivergence_operator(self, a11, a12, a22) -> sp.csr_matrix:
        """Matrix of ``v -> -a : D^2 v`` for per-node coefficients."""
        return -(
            sp.diags(np.broadcast_to(a11, (self.size,))) @ self.Dxx
            + sp.diags(2.0 * np.broadcast_to(a12, (self.size,))) @ self.Dxy
            + sp.diags(np.broadcast_to(a22, (self.size,))) @ self.Dyy
        ).tocsr()

    # -- inner products and norms -----------------------------------------

    def inner_product(self, f, g) -> float:
        f = self.check_field(f, "f")
        g = self.check_field(g, "g")
        return float(self.cell_area * np.dot(f, g))

    def l2_norm(self, u) -> float:
        u = self.check_field(u, "u")
        return float(np.sqrt(self.cell_area * np.dot(u, u)))

    def h2_seminorm(self, u) -> float:
        return float(np.sqrt(self.cell_area * np.sum(self.hessian(u).frobenius_sq())))

    def h2_norm(self, u) -> float:
        """Discrete full H^2 norm: L^2, gradient and Hessian contributions."""
        u = self.check_field(u, "u")
        grad_sq = np.sum((self.Dx @ u) ** 2 + (self.Dy @ u) ** 2) * self.cell_area
        return float(np.sqrt(self.l2_norm(u) ** 2 + grad_sq + self.h2_seminorm(u) ** 2))
