"""Couplings mapping densities to HJB right-hand sides.

Kernel couplings discretize ``F[m](x) = int K(x, y) m(y) dy`` with the nodal
rule, so the matrix entries are ``K(x_i, x_j) * hx * hy``. A local coupling
``c * m + g0`` is provided for experiments outside the completely continuous
class.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ContractViolation

logger = logging.getLogger(__name__)

__all__ = ["KernelCoupling", "LocalCoupling", "apply_coupling", "monotonicity_probe", "MAX_DENSE_N"]

MAX_DENSE_N = 96


@dataclass(eq=False)
class KernelCoupling:
    grid: object
    matrix: np.ndarray
    kind: str = "tabulated"
    symmetric: bool = False
    strictly_monotone: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        N = self.grid.size
        if self.matrix.shape != (N, N):
            raise ContractViolation(f"kernel matrix has shape {self.matrix.shape}, expected ({N}, {N})")
        if self.symmetric and not np.allclose(self.matrix, self.matrix.T, rtol=0, atol=1e-12):
            raise ContractViolation("kernel flagged symmetric but matrix is not")

    @classmethod
    def from_kernel(cls, grid, kernel, kind="callable", symmetric=None, strictly_monotone=False, **params):
        """Tabulate ``kernel(X, Y)`` (vectorized over node pairs) times the cell area."""
        if grid.n > MAX_DENSE_N:
            raise ContractViolation(f"dense kernel matrix capped at n_interior <= {MAX_DENSE_N}")
        P = grid.points
        X = np.repeat(P[:, None, :], grid.size, axis=1)
        Y = np.repeat(P[None, :, :], grid.size, axis=0)
        mat = np.asarray(kernel(X, Y), dtype=float) * grid.cell_area
        if symmetric is None:
            symmetric = bool(np.allclose(mat, mat.T, rtol=0, atol=1e-12))
        return cls(grid, mat, kind, symmetric, strictly_monotone, params)

    @classmethod
    def gaussian(cls, grid, sigma=0.25, amplitude=1.0):
        """``amplitude * exp(-|x - y|^2 / sigma^2)``; a strictly positive definite kernel."""
        if grid.n > MAX_DENSE_N:
            raise ContractViolation(f"dense kernel matrix capped at n_interior <= {MAX_DENSE_N}")
        d2 = cdist(grid.points, grid.points, "sqeuclidean")
        mat = amplitude * np.exp(-d2 / sigma**2) * grid.cell_area
        return cls(grid, mat, "gaussian", True, amplitude > 0, {"sigma": sigma, "amplitude": amplitude})

    @classmethod
    def constant(cls, grid, value=1.0):
        mat = np.full((grid.size, grid.size), float(value) * grid.cell_area)
        # rank one: monotone for value >= 0 but never strictly
        return cls(grid, mat, "constant", True, False, {"value": value})

    @classmethod
    def from_csv(cls, path, grid):
        """Rows ``i, j, value`` with flat node indices; unspecified entries are zero."""
        mat = np.zeros((grid.size, grid.size))
        with open(Path(path), newline="") as fh:
            for rec in csv.DictReader(fh):
                i, j = int(rec["i"]), int(rec["j"])
                if not (0 <= i < grid.size and 0 <= j < grid.size):
                    raise ContractViolation(f"{path}: entry ({i}, {j}) outside the grid")
                mat[i, j] = float(rec["value"])
        mat *= grid.cell_area
        symmetric = bool(np.allclose(mat, mat.T, rtol=0, atol=1e-12))
        strict = False
        if symmetric:
            ev = np.linalg.eigvalsh(0.5 * (mat + mat.T))
            strict = bool(ev[0] > 1e-12 * max(abs(ev[-1]), 1e-300))
        return cls(grid, mat, "tabulated", symmetric, strict, {"path": str(path)})

    def apply(self, m):
        m = self.grid.check_field(m, "m")
        return self.matrix @ m

    def operator_norm(self) -> float:
        return float(np.linalg.norm(self.matrix, 2))


@dataclass(eq=False)
class LocalCoupling:
    grid: object
    slope: float = 1.0
    offset: np.ndarray | None = None

    def __post_init__(self):
        if self.slope < 0:
            raise ContractViolation(f"local coupling slope must be >= 0, got {self.slope}")
        if self.offset is None:
            self.offset = np.zeros(self.grid.size)
        self.offset = self.grid.check_field(self.offset, "offset")

    @property
    def strictly_monotone(self) -> bool:
        return self.slope > 0

    @property
    def symmetric(self) -> bool:
        return True

    def apply(self, m):
        m = self.grid.check_field(m, "m")
        return self.slope * m + self.offset

    def operator_norm(self) -> float:
        return float(self.slope)


def apply_coupling(F, m):
    return F.apply(m)


def monotonicity_probe(F, trials: int = 20, seed: int = 0) -> dict:
    """Minimum of ``(F[m1] - F[m2], m1 - m2)_h / |m1 - m2|_h^2`` over random nonnegative pairs."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    grid = F.grid
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(trials):
        m1 = rng.random(grid.size)
        m2 = rng.random(grid.size)
        d = m1 - m2
        ratios.append(grid.inner_product(F.apply(m1) - F.apply(m2), d) / grid.l2_norm(d) ** 2)
    return {"min_pairing": float(min(ratios)), "ratios": ratios}
