"""Coupled stationary MFG solves, VI verification and convergence studies.

The outer loop is a damped fixed point on the density: solve the HJB equation
with right-hand side ``F[m]``, pick a policy from its optimal sets, solve the
transposed KFP equation for ``m_hat`` and relax ``m <- (1 - theta) m + theta m_hat``.
Because the map depends on ``m`` only through the chosen policy, a candidate
``m_hat`` whose own HJB solve still admits the policy that produced it is an
exact fixed point; the loop jumps to such candidates.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .coupling import KernelCoupling, LocalCoupling
from .errors import ContractViolation, SolverFailure
from .hamiltonian import CoefficientFamily, CordesParams, NodalCoefficients, envelope_batch
from .hjb import solve_hjb, solve_hjb_envelope
from .kfp import SelectionField, sign_tolerance, solve_kfp
from .selection import optimize_selection

logger = logging.getLogger(__name__)

__all__ = [
    "ProblemSpec",
    "SolverOptions",
    "MfgSolution",
    "SweepResult",
    "solve_mfg",
    "solve_mfg_regularized",
    "verify_vi",
    "uniqueness_experiment",
    "regularization_sweep",
    "g_perturbation_study",
    "probe_fields",
]


@dataclass(eq=False)
class ProblemSpec:
    """A discrete MFG instance: grid, coefficient family, coupling and source."""

    grid: object
    family: CoefficientFamily
    coupling: KernelCoupling | LocalCoupling
    g: np.ndarray
    cordes: CordesParams = field(default_factory=CordesParams)
    eta: float | None = None
    name: str = "problem"

    def __post_init__(self):
        self.g = self.grid.check_field(self.g, "g")
        if not self.coupling.grid.same_as(self.grid):
            raise ContractViolation("coupling was built on a different grid")

    @cached_property
    def coefficients(self) -> NodalCoefficients:
        return self.family.on_grid(self.grid)

    def with_g(self, g) -> "ProblemSpec":
        return dataclasses.replace(self, g=np.asarray(g, dtype=float))

    def fp_tolerance(self) -> float:
        return 1e-8 * (1.0 + self.grid.l2_norm(self.g))


@dataclass
class SolverOptions:
    """Outer and inner tolerances; ``None`` tolerances resolve per problem."""

    theta_fp: float = 0.5
    tol_fp: float | None = None
    max_fp_iter: int = 500
    m_init: np.ndarray | None = None
    tol_hjb: float | None = None
    max_hjb_iter: int = 200
    tol_kfp: float = 1e-10
    tol_sel: float = 1e-8
    max_sel_iter: int = 2000
    renormalize: bool = False
    policy_jump: bool = True
    polish: bool = True
    n_vi_tests: int = 100
    seed: int = 42

    def __post_init__(self):
        if not (0.0 < self.theta_fp <= 1.0):
            raise ContractViolation(f"theta_fp must lie in (0, 1], got {self.theta_fp}")
        for name in ("tol_fp", "tol_hjb", "tol_kfp", "tol_sel"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise ContractViolation(f"{name} must be positive, got {val}")
        for name in ("max_fp_iter", "max_hjb_iter", "max_sel_iter"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")


@dataclass
class MfgSolution:
    u: np.ndarray
    m: np.ndarray
    selection: SelectionField
    policy: np.ndarray
    fp_history: list
    vi_margin_min: float = np.nan
    weights: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)
    converged: bool = True


@dataclass
class SweepResult:
    lambdas: list
    u_errors: list
    m_gaps: list
    envelope_gaps: list
    bounds: list
    status: list
    base: MfgSolution | None = None
    solutions: list = field(default_factory=list)
    strict: bool = True

    @property
    def all_ok(self) -> bool:
        return all(s == "ok" for s in self.status)

    @property
    def monotone_decrease(self) -> bool | None:
        """Whether ``u_errors`` is non-increasing; ``None`` (report only) without strict monotonicity."""
        if not self.strict:
            return None
        e = self.u_errors
        return self.all_ok and all(b <= a for a, b in zip(e, e[1:]))


# -- helpers ----------------------------------------------------------------------


def _check_problem(spec: ProblemSpec):
    ok, worst, failures = spec.coefficients.check_cordes(spec.cordes)
    if not ok:
        node, k = failures[0]
        raise ContractViolation(
            f"Cordes/ellipticity check failed at {len(failures)} (node, control) pairs, "
            f"first at node {node} control {k} (worst ratio {worst:.6g})"
        )
    if spec.g.min(initial=0.0) < -sign_tolerance(spec.g):
        raise ContractViolation(f"source g must be nonnegative (min {spec.g.min():.3e})")


def _wrap(exc: SolverFailure, where: str, history):
    return type(exc)(f"{where}: {exc}", best=exc.best, history=history)


def probe_fields(grid) -> np.ndarray:
    """Fixed test fields for weak pairings: 1, sin(pi x) sin(pi y), x - 1/2, cos(2 pi y)."""
    X, Y = grid.points[:, 0], grid.points[:, 1]
    x0, x1, y0, y1 = grid.box
    s = (X - x0) / (x1 - x0)
    t = (Y - y0) / (y1 - y0)
    return np.stack([np.ones_like(X), np.sin(np.pi * s) * np.sin(np.pi * t), s - 0.5, np.cos(2 * np.pi * t)])


def _probe_gaps(grid, m1, m2):
    return [abs(grid.inner_product(m1 - m2, phi)) for phi in probe_fields(grid)]


def _finalize(spec, opts, u, m, policy, history, weights=None, selection=None, polish=True):
    """Diagnostics, optional selection polish and VI verification for a converged pair."""
    grid = spec.grid
    coeffs = spec.coefficients
    g = spec.g
    F = spec.coupling.apply(m)
    value, optimal, _ = coeffs.hamiltonian(grid.hessian(u), spec.eta)
    diag = {
        "hjb_residual_sup": float(np.abs(value - F).max(initial=0.0)),
        "min_m": float(m.min()),
        "tol_sign": sign_tolerance(m),
        "lipschitz": coeffs.lipschitz,
        "coupling_operator_norm": spec.coupling.operator_norm(),
    }
    diag["nonnegative"] = diag["min_m"] >= -diag["tol_sign"]
    gl2 = grid.l2_norm(g)
    diag["C_obs"] = grid.l2_norm(m) / gl2 if gl2 > 0 else None
    if selection is None:
        selection = SelectionField.from_policy(coeffs, policy)
    J_plain = float(np.linalg.norm(selection.operator().T @ m - g))
    diag["selection_J"] = J_plain
    diag["selection_J_history"] = []
    if polish and diag["nonnegative"]:
        rep = optimize_selection(
            coeffs, u, m, g, spec.eta, opts.tol_sel, opts.max_sel_iter, initial_policy=policy
        )
        diag["selection_J_history"] = rep.J_history
        diag["selection_iterations"] = rep.iterations
        diag["selection_converged"] = rep.converged
        if rep.J_value <= J_plain:
            selection, weights = rep.selection, rep.weights
            diag["selection_J"] = rep.J_value
    gnorm = float(np.linalg.norm(g))
    diag["kfp_residual"] = diag["selection_J"]
    diag["kfp_relative_residual"] = diag["selection_J"] / gnorm if gnorm > 0 else 0.0
    if weights is None:
        weights = np.zeros((grid.size, coeffs.K))
        weights[np.arange(grid.size), policy] = 1.0
    sol = MfgSolution(u, m, selection, policy, history, np.nan, weights, diag)
    vi = verify_vi(spec, sol, opts.n_vi_tests, seed=opts.seed)
    sol.vi_margin_min = vi["margin_min"]
    diag["vi_margin_min"] = vi["margin_min"]
    diag["vi_margin_raw_min"] = vi["margin_raw_min"]
    diag["vi_negative_witnesses"] = len(vi["witnesses"])
    diag["fp_iterations"] = len(history)
    return sol


# -- nonsmooth solve ----------------------------------------------------------------


def solve_mfg(spec: ProblemSpec, opts: SolverOptions | None = None) -> MfgSolution:
    """Damped fixed-point iteration on the density with policy-iteration HJB solves.

    Raises
    ------
    ContractViolation
        Coefficients fail the Cordes check or ``g`` has negative entries.
    SolverFailure
        ``max_fp_iter`` exhausted (history attached), or an inner solver failed.
    """
    opts = opts or SolverOptions()
    _check_problem(spec)
    grid, coeffs, g = spec.grid, spec.coefficients, spec.g
    tol_fp = spec.fp_tolerance() if opts.tol_fp is None else opts.tol_fp
    theta = opts.theta_fp
    m = np.zeros(grid.size) if opts.m_init is None else grid.check_field(opts.m_init, "m_init").copy()
    hjb_kw = dict(tol=opts.tol_hjb, max_iter=opts.max_hjb_iter, renormalize=opts.renormalize, eta=spec.eta)

    history: list = []
    cached = None  # (hjb report, policy) already computed for the current m
    u_prev = None
    for k in range(1, opts.max_fp_iter + 1):
        try:
            if cached is not None:
                hjb, policy = cached
            else:
                hjb = solve_hjb(coeffs, spec.coupling.apply(m), u0=u_prev, **hjb_kw)
                policy = hjb.policy
            cached = None
            kfp = solve_kfp(SelectionField.from_policy(coeffs, policy), g, opts.tol_kfp)
        except SolverFailure as exc:
            raise _wrap(exc, f"fixed-point iteration {k}", history) from exc
        u_prev = hjb.u
        m_hat = kfp.m
        jump = grid.l2_norm(m_hat - m)
        entry = {
            "iter": k,
            "hjb_residual": hjb.residual_sup,
            "hjb_iterations": hjb.iterations,
            "kfp_residual": kfp.adjoint_residual,
            "step": "damped",
        }
        delta = theta * jump
        if delta <= tol_fp:
            entry["delta_m"] = delta
            history.append(entry)
            logger.info("fixed point reached after %d iterations", k)
            break
        m_next = (1.0 - theta) * m + theta * m_hat
        if opts.policy_jump:
            try:
                hjb_hat = solve_hjb(coeffs, spec.coupling.apply(m_hat), u0=hjb.u, **hjb_kw)
            except SolverFailure as exc:
                raise _wrap(exc, f"fixed-point iteration {k} (candidate check)", history) from exc
            _, opt_hat, _ = coeffs.hamiltonian(grid.hessian(hjb_hat.u), spec.eta)
            if np.all(opt_hat[np.arange(grid.size), policy]):
                m_next, delta = m_hat, jump
                entry["step"] = "policy-fixed-point"
                cached = (hjb_hat, policy)
        entry["delta_m"] = delta
        history.append(entry)
        logger.debug("fp iter %d delta %.3e step %s", k, delta, entry["step"])
        m = m_next
    else:
        raise SolverFailure(
            f"fixed-point iteration did not reach {tol_fp:.3e} in {opts.max_fp_iter} iterations "
            f"(last delta {history[-1]['delta_m']:.3e})",
            best=m,
            history=history,
        )

    # the undamped candidate carries the exact transpose solve for its policy
    if not np.array_equal(m_hat, m):
        try:
            hjb = solve_hjb(coeffs, spec.coupling.apply(m_hat), u0=hjb.u, **hjb_kw)
        except SolverFailure as exc:
            raise _wrap(exc, "final HJB solve", history) from exc
        _, opt_final, _ = coeffs.hamiltonian(grid.hessian(hjb.u), spec.eta)
        keep = opt_final[np.arange(grid.size), policy]
        policy = np.where(keep, policy, hjb.policy)
    sol = _finalize(spec, opts, hjb.u, m_hat, policy, history, polish=opts.polish)
    sol.diagnostics["tol_fp"] = tol_fp
    return sol


# -- regularized solve ----------------------------------------------------------------


def solve_mfg_regularized(spec: ProblemSpec, lam: float, opts: SolverOptions | None = None, u0=None) -> MfgSolution:
    """Same fixed point with the Moreau envelope in the HJB and its gradient in the KFP."""
    opts = opts or SolverOptions()
    if not (0.0 < lam <= 1.0):
        raise ContractViolation(f"lambda must lie in (0, 1], got {lam}")
    _check_problem(spec)
    grid, coeffs, g = spec.grid, spec.coefficients, spec.g
    tol_fp = spec.fp_tolerance() if opts.tol_fp is None else opts.tol_fp
    theta = opts.theta_fp
    m = np.zeros(grid.size) if opts.m_init is None else grid.check_field(opts.m_init, "m_init").copy()
    history: list = []
    u_prev = u0
    for k in range(1, opts.max_fp_iter + 1):
        try:
            hjb = solve_hjb_envelope(
                coeffs, spec.coupling.apply(m), lam, tol=opts.tol_hjb, max_iter=opts.max_hjb_iter, u0=u_prev
            )
            w = hjb.weights
            sel = SelectionField(grid, np.einsum("nk,nkij->nij", w, coeffs.a), "envelope", w)
            kfp = solve_kfp(sel, g, opts.tol_kfp)
        except SolverFailure as exc:
            raise _wrap(exc, f"regularized iteration {k} (lambda={lam:g})", history) from exc
        u_prev = hjb.u
        m_hat = kfp.m
        delta = theta * grid.l2_norm(m_hat - m)
        history.append(
            {
                "iter": k,
                "delta_m": delta,
                "hjb_residual": hjb.residual_sup,
                "hjb_iterations": hjb.iterations,
                "kfp_residual": kfp.adjoint_residual,
                "step": "damped",
            }
        )
        if delta <= tol_fp:
            break
        m = (1.0 - theta) * m + theta * m_hat
    else:
        raise SolverFailure(
            f"regularized fixed point (lambda={lam:g}) did not reach {tol_fp:.3e} in {opts.max_fp_iter} iterations",
            best=m,
            history=history,
        )
    # u solved against the last iterate; m_hat pairs with that u's envelope gradient
    sol = MfgSolution(hjb.u, m_hat, sel, np.argmax(w, axis=1), history, np.nan, w)
    sol.diagnostics = {
        "lambda": lam,
        "hjb_residual_sup": hjb.residual_sup,
        "kfp_residual": kfp.adjoint_residual,
        "duality_defect": float(np.linalg.norm(sel.operator().T @ m_hat - g)),
        "min_m": float(m_hat.min()),
        "fp_iterations": len(history),
        "tol_fp": tol_fp,
    }
    return sol


# -- verification ----------------------------------------------------------------------


def _vi_test_fields(grid, u, n_tests, rng):
    X, Y = grid.points[:, 0], grid.points[:, 1]
    x0, x1, y0, y1 = grid.box
    s = (X - x0) / (x1 - x0)
    t = (Y - y0) / (y1 - y0)
    polys = [s**a * t**b for a in range(4) for b in range(4) if a + b > 0]
    fields = [("identity", u.copy())]
    kinds = ["bump", "perturb", "poly"]
    amps = [1e-3, 1e-1, 1.0]
    i = 0
    while len(fields) < n_tests:
        kind = kinds[i % 3]
        if kind == "bump":
            c = rng.uniform(0.1, 0.9, size=2)
            r = rng.uniform(0.05, 0.4)
            amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 10.0)
            v = amp * np.exp(-((s - c[0]) ** 2 + (t - c[1]) ** 2) / r**2)
        elif kind == "perturb":
            amp = amps[(i // 3) % 3]
            v = u + amp * rng.uniform(-1.0, 1.0, size=grid.size)
        else:
            v = rng.choice([-1.0, 1.0]) * polys[(i // 3) % len(polys)]
        fields.append((kind, v))
        i += 1
    return fields[:n_tests]


def verify_vi(spec: ProblemSpec, sol: MfgSolution, n_tests: int = 100, seed: int = 42) -> dict:
    """Minimum over test fields ``v`` of ``(m, H[v] - H[u])_h - (g, v - u)_h``.

    Each margin is divided by ``1 + |m| |H[v] - H[u]| + |g| |v - u|`` (discrete
    L2 norms) so ``margin_min`` is scale free; ``witnesses`` lists the fields
    with a negative raw margin.
    """
    grid, coeffs, g = spec.grid, spec.coefficients, spec.g
    rng = np.random.default_rng(seed)
    Hu = coeffs.hamiltonian(grid.hessian(sol.u), spec.eta)[0]
    mn, gn = grid.l2_norm(sol.m), grid.l2_norm(g)
    margins, raw, witnesses = [], [], []
    for idx, (kind, v) in enumerate(_vi_test_fields(grid, sol.u, n_tests, rng)):
        dH = coeffs.hamiltonian(grid.hessian(v), spec.eta)[0] - Hu
        dv = v - sol.u
        margin = grid.inner_product(sol.m, dH) - grid.inner_product(g, dv)
        scale = 1.0 + mn * grid.l2_norm(dH) + gn * grid.l2_norm(dv)
        raw.append(margin)
        margins.append(margin / scale)
        if margin < 0:
            witnesses.append({"index": idx, "kind": kind, "margin": margin, "normalized": margin / scale})
    return {
        "margin_min": float(min(margins, default=0.0)),
        "margin_raw_min": float(min(raw, default=0.0)),
        "margins": margins,
        "witnesses": witnesses,
    }


# -- experiments -------------------------------------------------------------------------


def uniqueness_experiment(spec: ProblemSpec, inits, opts: SolverOptions | None = None) -> dict:
    """Solve from each initial density; report the largest pairwise L2 gap and cross pairing."""
    if not spec.coupling.strictly_monotone:
        raise ContractViolation("uniqueness experiment needs a strictly monotone coupling")
    opts = opts or SolverOptions()
    grid = spec.grid
    sols = [solve_mfg(spec, dataclasses.replace(opts, m_init=m0)) for m0 in inits]
    gap, cross = 0.0, -np.inf
    for i in range(len(sols)):
        for j in range(i + 1, len(sols)):
            dm = sols[i].m - sols[j].m
            gap = max(gap, grid.l2_norm(dm))
            dF = spec.coupling.apply(sols[i].m) - spec.coupling.apply(sols[j].m)
            cross = max(cross, grid.inner_product(dF, dm))
    return {"max_pairwise_gap": gap, "max_cross_pairing": cross if len(sols) > 1 else 0.0, "solutions": sols}


def _envelope_gap(spec, sol_list, lam, seed, n_random=200):
    """Sup of ``H - H_lam`` over the nodal Hessians of given fields and random matrices."""
    coeffs, grid = spec.coefficients, spec.grid
    rng = np.random.default_rng(seed)
    nodes, mats = [], []
    for u in sol_list:
        nodes.append(np.arange(grid.size))
        mats.append(grid.hessian(u).matrices())
    idx = rng.integers(0, grid.size, size=n_random)
    R = rng.normal(scale=10.0, size=(n_random, 2, 2))
    nodes.append(idx)
    mats.append(0.5 * (R + np.swapaxes(R, 1, 2)))
    nodes = np.concatenate(nodes)
    M = np.concatenate(mats)
    a, f = coeffs.a[nodes], coeffs.f[nodes]
    H = (-np.einsum("nkij,nij->nk", a, M) - f).max(axis=1)
    Hl = envelope_batch(a, f, M, lam)[0]
    return float(np.abs(H - Hl).max())


def regularization_sweep(
    spec: ProblemSpec,
    lambdas,
    opts: SolverOptions | None = None,
    base: MfgSolution | None = None,
    overrides=None,
) -> SweepResult:
    """Regularized solves for descending ``lambdas`` compared against the nonsmooth solution.

    ``overrides`` optionally maps a position in ``lambdas`` to a dict of
    :class:`SolverOptions` fields for that entry only. Per-entry failures are
    recorded in ``status`` and the sweep continues.
    """
    opts = opts or SolverOptions()
    lambdas = [float(x) for x in lambdas]
    if any(not (0.0 < x <= 1.0) for x in lambdas):
        raise ContractViolation("lambdas must lie in (0, 1]")
    if any(b > a for a, b in zip(lambdas, lambdas[1:])):
        raise ContractViolation("lambdas must be descending")
    overrides = overrides or {}
    if base is None:
        base = solve_mfg(spec, opts)
    grid = spec.grid
    L = spec.coefficients.lipschitz
    res = SweepResult(lambdas, [], [], [], [], [], base, strict=spec.coupling.strictly_monotone)
    u_prev = base.u
    for i, lam in enumerate(lambdas):
        o = dataclasses.replace(opts, **overrides.get(i, {}))
        res.bounds.append(0.5 * L**2 * lam)
        try:
            sol = solve_mfg_regularized(spec, lam, o, u0=u_prev)
        except SolverFailure as exc:
            logger.warning("sweep entry lambda=%g failed: %s", lam, exc)
            res.status.append(f"failed: {exc}")
            res.u_errors.append(np.nan)
            res.m_gaps.append([np.nan] * len(probe_fields(grid)))
            res.envelope_gaps.append(_envelope_gap(spec, [base.u], lam, o.seed + i))
            res.solutions.append(None)
            continue
        u_prev = sol.u
        res.status.append("ok")
        res.u_errors.append(grid.h2_norm(sol.u - base.u))
        res.m_gaps.append(_probe_gaps(grid, sol.m, base.m))
        res.envelope_gaps.append(_envelope_gap(spec, [base.u, sol.u], lam, o.seed + i))
        res.solutions.append(sol)
        logger.info("lambda=%g u_error=%.3e", lam, res.u_errors[-1])
    return res


def g_perturbation_study(spec: ProblemSpec, g_sequence, opts: SolverOptions | None = None, base=None) -> list:
    """Solve for each source ``g_n`` and compare with the solution for ``spec.g``."""
    opts = opts or SolverOptions()
    if base is None:
        base = solve_mfg(spec, opts)
    grid = spec.grid
    out = []
    for n, gn in enumerate(g_sequence):
        gn = grid.check_field(gn, f"g_sequence[{n}]")
        if gn.min(initial=0.0) < 0:
            raise ContractViolation(f"g_sequence[{n}] has negative entries")
        try:
            sol = solve_mfg(spec.with_g(gn), opts)
        except SolverFailure as exc:
            out.append({"index": n, "status": f"failed: {exc}", "u_gap": np.nan, "m_gaps": None})
            continue
        out.append(
            {
                "index": n,
                "status": "ok",
                "g_gap": grid.l2_norm(gn - spec.g),
                "u_gap": grid.h2_norm(sol.u - base.u),
                "m_gaps": _probe_gaps(grid, sol.m, base.m),
            }
        )
    return out
