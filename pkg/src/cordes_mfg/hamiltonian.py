"""Max-type Hamiltonians over a finite control set.

For controls ``k = 0..K-1`` with diffusion matrices ``a(x, k)`` and costs
``f(x, k)``::

    H(x, M) = max_k { -a(x, k) : M - f(x, k) }

which is convex and piecewise affine in the symmetric matrix ``M``. This
module evaluates ``H``, its (eta-)optimal control sets and subdifferential
vertices, the Cordes check, the renormalization weight ``Tr a / |a|^2`` and
the Moreau envelope ``H_lam`` together with its gradient.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, DomainError, QPSolverError
from .simplex import solve_dual_qp

__all__ = [
    "ControlSet",
    "CordesParams",
    "CoefficientFamily",
    "IsotropicFamily",
    "DiagonalFamily",
    "RotationFamily",
    "FunctionFamily",
    "TabulatedFamily",
    "NodalCoefficients",
    "HamEval",
    "EnvelopeEval",
    "CordesReport",
    "default_eta",
    "eval_hamiltonian",
    "subdifferential_vertices",
    "check_cordes",
    "cordes_batch",
    "renormalization_gamma",
    "moreau_envelope",
    "envelope_batch",
    "lipschitz_constant",
]

TOL_QP = 1e-10
MAX_QP_ITER = 500


def default_eta(value):
    """Optimality slack used when none is given: ``1e-10 * (1 + |value|)``."""
    return 1e-10 * (1.0 + np.abs(value))


def _check_symmetric(M, name="M"):
    M = np.asarray(M, dtype=float)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise ContractViolation(f"{name} must be square, got shape {M.shape}")
    asym = np.abs(M - np.swapaxes(M, -1, -2)).max(initial=0.0)
    if asym > 1e-12 * (1.0 + np.abs(M).max(initial=0.0)):
        raise ContractViolation(f"{name} is not symmetric (max asymmetry {asym:.3e})")
    return M


# -- controls and coefficient families ----------------------------------------


@dataclass(frozen=True)
class ControlSet:
    """Ordered finite sample of controls: opaque labels plus parameter vectors."""

    labels: tuple
    params: np.ndarray = field(default=None, compare=False)

    def __post_init__(self):
        labels = tuple(str(s) for s in self.labels)
        if len(labels) < 1:
            raise ContractViolation("a control set needs at least one control")
        params = self.params
        if params is None:
            params = np.arange(len(labels), dtype=float)[:, None]
        params = np.asarray(params, dtype=float).reshape(len(labels), -1)
        keys = [(lab, tuple(p)) for lab, p in zip(labels, params)]
        if len(set(keys)) != len(keys):
            raise ContractViolation("controls must be distinct")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "params", params)

    @property
    def K(self) -> int:
        return len(self.labels)

    def __len__(self):
        return self.K


@dataclass(frozen=True)
class CordesParams:
    nu_lower: float = 1.0
    nu_upper: float = 1.0
    epsilon: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.nu_lower <= self.nu_upper):
            raise ContractViolation(
                f"need 0 < nu_lower <= nu_upper, got {self.nu_lower}, {self.nu_upper}"
            )
        if not (0.0 < self.epsilon <= 1.0):
            raise ContractViolation(f"epsilon must lie in (0, 1], got {self.epsilon}")


def _costs_on(costs, pts, K):
    if callable(costs):
        out = np.asarray(costs(pts), dtype=float)
        return np.broadcast_to(out, (pts.shape[0], K)).copy()
    c = np.zeros(K) if costs is None else np.asarray(costs, dtype=float).reshape(K)
    return np.broadcast_to(c, (pts.shape[0], K)).copy()


class CoefficientFamily:
    """Base class: diffusion matrices ``a(x, k)`` and costs ``f(x, k)``.

    Subclasses implement :meth:`on_points`, returning arrays of shape
    ``(P, K, d, d)`` and ``(P, K)`` for ``P`` points.
    """

    dim = 2

    def __init__(self, controls: ControlSet):
        self.controls = controls

    @property
    def K(self) -> int:
        return self.controls.K

    def on_points(self, pts):
        raise NotImplementedError

    def at(self, x):
        """Coefficients at a single point: ``(K, d, d)`` and ``(K,)``."""
        a, f = self.on_points(np.asarray(x, dtype=float).reshape(1, -1))
        return a[0], f[0]

    def on_grid(self, grid) -> "NodalCoefficients":
        a, f = self.on_points(grid.points)
        return NodalCoefficients(grid, a, f)


class IsotropicFamily(CoefficientFamily):
    """``a(x, k) = (1 + alpha_k) I``."""

    def __init__(self, alphas: Sequence[float], costs=None, dim: int = 2):
        alphas = np.asarray(alphas, dtype=float).ravel()
        super().__init__(ControlSet([f"alpha={a:g}" for a in alphas], alphas[:, None]))
        self.alphas = alphas
        self.costs = costs
        self.dim = dim

    def on_points(self, pts):
        pts = np.atleast_2d(pts)
        a = (1.0 + self.alphas)[None, :, None, None] * np.eye(self.dim)
        a = np.broadcast_to(a, (pts.shape[0], self.K, self.dim, self.dim)).copy()
        return a, _costs_on(self.costs, pts, self.K)


class DiagonalFamily(CoefficientFamily):
    """``a(x, k) = diag(diagonals[k])``."""

    def __init__(self, diagonals, costs=None):
        diagonals = np.atleast_2d(np.asarray(diagonals, dtype=float))
        super().__init__(
            ControlSet([f"diag{tuple(np.round(d, 12))}" for d in diagonals], diagonals)
        )
        self.diagonals = diagonals
        self.costs = costs
        self.dim = diagonals.shape[1]

    def on_points(self, pts):
        pts = np.atleast_2d(pts)
        a = np.zeros((self.K, self.dim, self.dim))
        idx = np.arange(self.dim)
        a[:, idx, idx] = self.diagonals
        a = np.broadcast_to(a, (pts.shape[0],) + a.shape).copy()
        return a, _costs_on(self.costs, pts, self.K)


class RotationFamily(CoefficientFamily):
    """``a(x, k) = R(t) diag(l1, l2) R(t)^T`` with ``t = angle_k + twist * (x + y)``."""

    def __init__(self, angles, eigenvalues=(1.0, 2.0), costs=None, twist: float = 0.0):
        angles = np.asarray(angles, dtype=float).ravel()
        super().__init__(ControlSet([f"theta={t:g}" for t in angles], angles[:, None]))
        self.angles = angles
        self.eigenvalues = np.asarray(eigenvalues, dtype=float).reshape(2)
        self.costs = costs
        self.twist = float(twist)

    def on_points(self, pts):
        pts = np.atleast_2d(pts)
        theta = self.angles[None, :] + self.twist * pts.sum(axis=1)[:, None]
        c, s = np.cos(theta), np.sin(theta)
        l1, l2 = self.eigenvalues
        a = np.empty(theta.shape + (2, 2))
        a[..., 0, 0] = l1 * c**2 + l2 * s**2
        a[..., 1, 1] = l1 * s**2 + l2 * c**2
        a[..., 0, 1] = a[..., 1, 0] = (l1 - l2) * c * s
        return a, _costs_on(self.costs, pts, self.K)


class FunctionFamily(CoefficientFamily):
    """Family given by callables ``a_fn(pts) -> (P, K, d, d)``, ``f_fn(pts) -> (P, K)``."""

    def __init__(self, a_fn: Callable, f_fn: Callable, controls: ControlSet, dim: int = 2):
        super().__init__(controls)
        self.a_fn, self.f_fn, self.dim = a_fn, f_fn, dim

    def on_points(self, pts):
        pts = np.atleast_2d(pts)
        return np.asarray(self.a_fn(pts), dtype=float), np.asarray(self.f_fn(pts), dtype=float)


class TabulatedFamily(CoefficientFamily):
    """Per-node tabulated coefficients; off-node queries use the nearest node."""

    def __init__(self, grid, a, f, controls: ControlSet | None = None):
        a = np.asarray(a, dtype=float)
        f = np.asarray(f, dtype=float)
        if a.shape[:1] != (grid.size,) or a.shape[2:] != (2, 2) or f.shape != a.shape[:2]:
            raise ContractViolation(
                f"tabulated coefficients have shapes {a.shape}, {f.shape} for {grid.size} nodes"
            )
        K = a.shape[1]
        super().__init__(controls or ControlSet([f"k{k}" for k in range(K)]))
        self.grid, self.a, self.f = grid, a, f

    def on_points(self, pts):
        pts = np.atleast_2d(pts)
        g = self.grid
        i = np.clip(np.rint((pts[:, 0] - g.box[0]) / g.hx) - 1, 0, g.n - 1).astype(int)
        j = np.clip(np.rint((pts[:, 1] - g.box[2]) / g.hy) - 1, 0, g.n - 1).astype(int)
        p = i * g.n + j
        return self.a[p].copy(), self.f[p].copy()

    @classmethod
    def from_csv(cls, path, grid):
        """Read rows ``node_i, node_j, k, a11, a12, a22, f``; every (node, k) must appear."""
        rows = []
        with open(Path(path), newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append(
                    (int(rec["node_i"]), int(rec["node_j"]), int(rec["k"]),
                     float(rec["a11"]), float(rec["a12"]), float(rec["a22"]), float(rec["f"]))
                )
        if not rows:
            raise ContractViolation(f"{path}: no coefficient rows")
        K = max(r[2] for r in rows) + 1
        a = np.full((grid.size, K, 2, 2), np.nan)
        f = np.full((grid.size, K), np.nan)
        for i, j, k, a11, a12, a22, fv in rows:
            if not (0 <= i < grid.n and 0 <= j < grid.n):
                raise ContractViolation(f"{path}: node ({i}, {j}) outside the grid")
            p = i * grid.n + j
            a[p, k] = [[a11, a12], [a12, a22]]
            f[p, k] = fv
        if np.isnan(a).any() or np.isnan(f).any():
            raise ContractViolation(f"{path}: missing (node, control) entries")
        return cls(grid, a, f)

    def to_csv(self, path):
        g = self.grid
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node_i", "node_j", "k", "a11", "a12", "a22", "f"])
            for p, (i, j) in enumerate(g.indices):
                for k in range(self.K):
                    A = self.a[p, k]
                    w.writerow([i, j, k] + [f"{v:.17g}" for v in (A[0, 0], A[0, 1], A[1, 1], self.f[p, k])])


# -- evaluation results -------------------------------------------------------


@dataclass(frozen=True)
class HamEval:
    value: float
    optimal_set: tuple
    eta: float
    lipschitz: float


@dataclass(frozen=True)
class EnvelopeEval:
    value: float
    gradient: np.ndarray
    dual_weights: np.ndarray
    lam: float
    gap: float


@dataclass(frozen=True)
class CordesReport:
    elliptic: bool
    cordes: bool
    ratio: float
    eigenvalues: np.ndarray


# -- pointwise operations -------------------------------------------------------


def _scores(a, f, M):
    """``-a_k : M - f_k`` for every control (batched over leading axes).

    The Frobenius product is accumulated entry by entry in row-major order so
    results do not depend on the summation order chosen by a BLAS kernel.
    """
    d = M.shape[-1]
    Mk = M[..., None, :, :]
    acc = np.zeros(a.shape[:-2])
    for i in range(d):
        for j in range(d):
            acc = acc + a[..., i, j] * Mk[..., i, j]
    return -acc - f


def eval_hamiltonian(family: CoefficientFamily, x, M, eta=None) -> HamEval:
    M = _check_symmetric(M)
    a, f = family.at(x)
    s = _scores(a, f, M)
    value = float(s.max())
    eta = float(default_eta(value) if eta is None else eta)
    if eta < 0:
        raise ContractViolation(f"eta must be nonnegative, got {eta}")
    optimal = tuple(int(k) for k in np.flatnonzero(value - s <= eta))
    return HamEval(value, optimal, eta, float(np.sqrt(np.einsum("kij,kij->k", a, a)).max()))


def subdifferential_vertices(family: CoefficientFamily, x, M, eta=None) -> list:
    """Vertices ``-a(x, k)`` over the eta-optimal controls; their hull is the subdifferential."""
    ev = eval_hamiltonian(family, x, M, eta)
    a, _ = family.at(x)
    return [-a[k] for k in ev.optimal_set]


def check_cordes(a_matrix, params: CordesParams, rtol: float = 1e-12) -> CordesReport:
    """Ellipticity bounds and the Frobenius-to-trace cone condition.

    Comparisons carry a relative slack ``rtol`` so that boundary cases such as
    the identity with ``epsilon = 1`` are not lost to rounding.
    """
    A = _check_symmetric(a_matrix, "a_matrix")
    d = A.shape[-1]
    eig = np.linalg.eigvalsh(A)
    elliptic = bool(
        eig.min() >= params.nu_lower * (1 - rtol) and eig.max() <= params.nu_upper * (1 + rtol)
    )
    tr = float(np.trace(A))
    ratio = float(np.linalg.norm(A) / tr) if tr > 0 else np.inf
    cordes = bool(ratio <= (1 + rtol) / np.sqrt(d - 1 + params.epsilon))
    return CordesReport(elliptic, cordes, ratio, eig)


def renormalization_gamma(family: CoefficientFamily, x, k: int) -> float:
    """``Tr a(x, k) / |a(x, k)|^2``."""
    a, _ = family.at(x)
    A = a[k]
    nrm2 = float(np.sum(A * A))
    if nrm2 == 0.0:
        raise DomainError(f"a(x, {k}) is the zero matrix; the renormalization is undefined")
    return float(np.trace(A)) / nrm2


def envelope_batch(a, f, M, lam, tol=TOL_QP, max_iter=MAX_QP_ITER, raise_on_failure=True):
    """Moreau envelope for a batch of points.

    Parameters
    ----------
    a : (B, K, d, d) array
    f : (B, K) array
    M : (B, d, d) array
    lam : float in (0, 1]

    Returns
    -------
    value : (B,) array
    grad : (B, d, d) array
        ``dH_lam/dM = -sum_k w_k a_k``.
    w : (B, K) array
        Optimal dual weights.
    gap : (B,) array
        Certified bound on the dual suboptimality.
    """
    if not (0.0 < lam <= 1.0):
        raise ContractViolation(f"lambda must lie in (0, 1], got {lam}")
    a = np.asarray(a, dtype=float)
    B, K, d, _ = a.shape
    c = _scores(a, f, M)
    G = a.reshape(B, K, d * d)
    value, w, gap, ok, _ = solve_dual_qp(c, G, lam, tol=tol, max_iter=max_iter)
    grad = -np.einsum("bk,bkij->bij", w, a)
    if raise_on_failure and not ok.all():
        bad = np.flatnonzero(~ok)
        raise QPSolverError(
            f"envelope QP did not reach tolerance at {bad.size} point(s); worst gap {gap[bad].max():.3e}",
            best=(value, grad, w, gap),
        )
    return value, grad, w, gap


def moreau_envelope(family: CoefficientFamily, x, M, lam: float, tol=TOL_QP, max_iter=MAX_QP_ITER) -> EnvelopeEval:
    """``H_lam(x, M) = min_N H(x, N) + |N - M|^2 / (2 lam)`` via its simplex dual."""
    M = _check_symmetric(M)
    a, f = family.at(x)
    value, grad, w, gap = envelope_batch(a[None], f[None], M[None], lam, tol, max_iter)
    return EnvelopeEval(float(value[0]), grad[0], w[0], float(lam), float(gap[0]))


def lipschitz_constant(a) -> float:
    """Largest Frobenius norm over all supplied matrices ``a[..., d, d]``."""
    a = np.asarray(a, dtype=float)
    return float(np.sqrt(np.einsum("...ij,...ij->...", a, a)).max())


# -- grid-level view ------------------------------------------------------------


@dataclass(eq=False)
class NodalCoefficients:
    """Coefficients sampled at the interior nodes of a grid.

    ``a`` has shape ``(N, K, 2, 2)`` and ``f`` shape ``(N, K)``.
    """

    grid: object
    a: np.ndarray
    f: np.ndarray

    @property
    def K(self) -> int:
        return self.a.shape[1]

    @property
    def lipschitz(self) -> float:
        return lipschitz_constant(self.a)

    def gamma(self) -> np.ndarray:
        nrm2 = np.einsum("nkij,nkij->nk", self.a, self.a)
        if np.any(nrm2 == 0):
            raise DomainError("zero diffusion matrix at some node; renormalization undefined")
        return np.trace(self.a, axis1=2, axis2=3) / nrm2

    def scores(self, hess) -> np.ndarray:
        """``(N, K)`` array of ``-a_k : D^2u - f_k`` from a :class:`HessianField`."""
        a = self.a
        return -(
            a[:, :, 0, 0] * hess.xx[:, None]
            + 2.0 * a[:, :, 0, 1] * hess.xy[:, None]
            + a[:, :, 1, 1] * hess.yy[:, None]
        ) - self.f

    def hamiltonian(self, hess, eta=None):
        """Nodal values, eta-optimal masks and lowest-index optimal policy."""
        s = self.scores(hess)
        value = s.max(axis=1)
        eta = default_eta(value) if eta is None else np.broadcast_to(eta, value.shape)
        optimal = (value[:, None] - s) <= eta[:, None]
        policy = np.argmax(optimal, axis=1)
        return value, optimal, policy

    def selected(self, policy) -> np.ndarray:
        """``(N, 2, 2)`` matrices for a per-node control index."""
        return self.a[np.arange(self.a.shape[0]), policy]

    def check_cordes(self, params: CordesParams):
        """Cordes and ellipticity at every node and control.

        Returns ``(ok, worst_ratio, failures)`` with ``failures`` a list of
        ``(node, control)`` pairs.
        """
        elliptic, cordes, ratio = cordes_batch(self.a, params)
        bad = np.argwhere(~(elliptic & cordes))
        return bad.size == 0, float(ratio.max()), [tuple(map(int, b)) for b in bad]


def cordes_batch(a, params: CordesParams, rtol: float = 1e-12):
    """Vectorized :func:`check_cordes` over ``a[..., d, d]``; returns bool, bool, ratio arrays."""
    a = np.asarray(a, dtype=float)
    d = a.shape[-1]
    eig = np.linalg.eigvalsh(a)
    elliptic = (eig[..., 0] >= params.nu_lower * (1 - rtol)) & (eig[..., -1] <= params.nu_upper * (1 + rtol))
    tr = np.trace(a, axis1=-2, axis2=-1)
    nrm = np.sqrt(np.einsum("...ij,...ij->...", a, a))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(tr > 0, nrm / np.where(tr > 0, tr, 1.0), np.inf)
    cordes = ratio <= (1 + rtol) / np.sqrt(d - 1 + params.epsilon)
    return elliptic, cordes, ratio
