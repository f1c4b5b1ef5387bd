"""YAML run configurations: parsing, validation and problem construction.

The grammar is documented in ``docs/config.md``. Every validation failure
raises :class:`ConfigError` whose ``key`` is the dotted path of the offending
entry, e.g. ``solver.tol_fp``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .coupling import KernelCoupling, LocalCoupling
from .errors import ConfigError, ContractViolation
from .grid import Grid
from .hamiltonian import CordesParams, DiagonalFamily, IsotropicFamily, RotationFamily, TabulatedFamily
from .mfg import ProblemSpec, SolverOptions

__all__ = ["RunConfig", "load_config", "parse_config", "build_problem", "build_sources"]

_TOP_KEYS = {"seed", "threads", "problem", "solver", "verify", "sweep"}
_PROBLEM_KEYS = {"name", "domain", "controls", "cordes", "coupling", "source", "eta"}
_SOLVER_FLOATS = {"theta_fp", "tol_fp", "tol_hjb", "tol_kfp", "tol_sel"}
_SOLVER_INTS = {"max_fp_iter", "max_hjb_iter", "max_sel_iter"}
_SOLVER_BOOLS = {"renormalize", "policy_jump", "polish"}


@dataclass
class RunConfig:
    problem: dict
    solver: SolverOptions
    seed: int = 42
    threads: int = 0
    n_tests: int = 100
    sweep: dict = field(default_factory=dict)
    base_dir: Path = Path(".")
    raw: dict = field(default_factory=dict)


def _section(d, key, required=True):
    val = d.get(key.rsplit(".", 1)[-1])
    if val is None:
        if required:
            raise ConfigError(key, "missing section")
        return {}
    if not isinstance(val, dict):
        raise ConfigError(key, "must be a mapping")
    return val


def _unknown(d, allowed, prefix):
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{prefix}{k}", "unknown key")


def _number(val, key, positive=False, allow_none=False):
    if val is None and allow_none:
        return None
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(key, f"expected a number, got {val!r}")
    val = float(val)
    if not np.isfinite(val):
        raise ConfigError(key, "must be finite")
    if positive and val <= 0:
        raise ConfigError(key, f"must be > 0, got {val:g}")
    return val


def _integer(val, key, minimum=None):
    if isinstance(val, bool) or not isinstance(val, int):
        raise ConfigError(key, f"expected an integer, got {val!r}")
    if minimum is not None and val < minimum:
        raise ConfigError(key, f"must be >= {minimum}, got {val}")
    return val


def _number_list(val, key, length=None):
    if not isinstance(val, (list, tuple)) or not val:
        raise ConfigError(key, "expected a non-empty list of numbers")
    out = [_number(v, f"{key}[{i}]") for i, v in enumerate(val)]
    if length is not None and len(out) != length:
        raise ConfigError(key, f"expected {length} entries, got {len(out)}")
    return out


def _path(val, key, base_dir):
    if not isinstance(val, str):
        raise ConfigError(key, "expected a file path")
    p = Path(val)
    if not p.is_absolute():
        p = base_dir / p
    if not p.is_file():
        raise ConfigError(key, f"file not found: {p}")
    return p


def _parse_solver(d) -> SolverOptions:
    _unknown(d, _SOLVER_FLOATS | _SOLVER_INTS | _SOLVER_BOOLS, "solver.")
    kw = {}
    for k in _SOLVER_FLOATS & d.keys():
        kw[k] = _number(d[k], f"solver.{k}", positive=True, allow_none=k in ("tol_fp", "tol_hjb"))
    if "theta_fp" in kw and kw["theta_fp"] > 1:
        raise ConfigError("solver.theta_fp", f"must lie in (0, 1], got {kw['theta_fp']:g}")
    for k in _SOLVER_INTS & d.keys():
        kw[k] = _integer(d[k], f"solver.{k}", minimum=1)
    for k in _SOLVER_BOOLS & d.keys():
        if not isinstance(d[k], bool):
            raise ConfigError(f"solver.{k}", "expected true or false")
        kw[k] = d[k]
    return SolverOptions(**kw)


def _validate_problem(p, base_dir):
    _unknown(p, _PROBLEM_KEYS, "problem.")
    dom = _section(p, "problem.domain")
    _unknown(dom, {"box", "n_interior"}, "problem.domain.")
    if "n_interior" not in dom:
        raise ConfigError("problem.domain.n_interior", "missing")
    _integer(dom["n_interior"], "problem.domain.n_interior", minimum=1)
    box = _number_list(dom.get("box", [0.0, 1.0, 0.0, 1.0]), "problem.domain.box", 4)
    if not (box[1] > box[0] and box[3] > box[2]):
        raise ConfigError("problem.domain.box", "expected [x_min, x_max, y_min, y_max] with positive extents")

    ctl = _section(p, "problem.controls")
    fam = ctl.get("family")
    common = {"family", "costs"}
    if fam == "isotropic":
        _unknown(ctl, common | {"alphas"}, "problem.controls.")
        K = len(_number_list(ctl.get("alphas"), "problem.controls.alphas"))
    elif fam == "diagonal":
        _unknown(ctl, common | {"diagonals"}, "problem.controls.")
        diags = ctl.get("diagonals")
        if not isinstance(diags, list) or not diags:
            raise ConfigError("problem.controls.diagonals", "expected a list of [a11, a22] pairs")
        for i, d in enumerate(diags):
            _number_list(d, f"problem.controls.diagonals[{i}]", 2)
        K = len(diags)
    elif fam == "rotation":
        _unknown(ctl, common | {"angles", "eigenvalues", "twist"}, "problem.controls.")
        K = len(_number_list(ctl.get("angles"), "problem.controls.angles"))
        if "eigenvalues" in ctl:
            ev = _number_list(ctl["eigenvalues"], "problem.controls.eigenvalues", 2)
            if min(ev) <= 0:
                raise ConfigError("problem.controls.eigenvalues", "must be positive")
        if "twist" in ctl:
            _number(ctl["twist"], "problem.controls.twist")
    elif fam == "tabulated":
        _unknown(ctl, {"family", "path"}, "problem.controls.")
        _path(ctl.get("path"), "problem.controls.path", base_dir)
        K = None
    else:
        raise ConfigError("problem.controls.family", f"unknown family {fam!r}")
    if "costs" in ctl:
        _number_list(ctl["costs"], "problem.controls.costs", K)

    cor = _section(p, "problem.cordes", required=False)
    _unknown(cor, {"nu_lower", "nu_upper", "epsilon"}, "problem.cordes.")
    vals = {k: _number(cor[k], f"problem.cordes.{k}") for k in cor}
    try:
        CordesParams(**vals)
    except ContractViolation as exc:
        raise ConfigError("problem.cordes", str(exc)) from exc

    cpl = _section(p, "problem.coupling")
    kind = cpl.get("type")
    if kind == "gaussian":
        _unknown(cpl, {"type", "sigma", "amplitude", "norm_bound"}, "problem.coupling.")
        _number(cpl.get("sigma", 0.25), "problem.coupling.sigma", positive=True)
        amp = _number(cpl.get("amplitude", 1.0), "problem.coupling.amplitude")
        if amp < 0:
            raise ConfigError("problem.coupling.amplitude", "must be >= 0")
    elif kind == "constant":
        _unknown(cpl, {"type", "value", "norm_bound"}, "problem.coupling.")
        _number(cpl.get("value", 1.0), "problem.coupling.value")
    elif kind == "tabulated":
        _unknown(cpl, {"type", "path", "norm_bound"}, "problem.coupling.")
        _path(cpl.get("path"), "problem.coupling.path", base_dir)
    elif kind == "local":
        _unknown(cpl, {"type", "slope", "offset", "norm_bound"}, "problem.coupling.")
        if _number(cpl.get("slope", 1.0), "problem.coupling.slope") < 0:
            raise ConfigError("problem.coupling.slope", "must be >= 0")
        _number(cpl.get("offset", 0.0), "problem.coupling.offset")
    else:
        raise ConfigError("problem.coupling.type", f"unknown coupling type {kind!r}")
    if "norm_bound" in cpl:
        _number(cpl["norm_bound"], "problem.coupling.norm_bound", positive=True)

    _validate_source(_section(p, "problem.source"), "problem.source", base_dir)
    if p.get("eta") is not None:
        if _number(p["eta"], "problem.eta") < 0:
            raise ConfigError("problem.eta", "must be >= 0")


def _validate_source(src, key, base_dir):
    kind = src.get("type")
    if kind == "constant":
        _unknown(src, {"type", "value"}, f"{key}.")
        if _number(src.get("value", 1.0), f"{key}.value") < 0:
            raise ConfigError(f"{key}.value", "source must be nonnegative")
    elif kind == "bump":
        _unknown(src, {"type", "center", "radius", "amplitude", "base"}, f"{key}.")
        _number_list(src.get("center", [0.5, 0.5]), f"{key}.center", 2)
        _number(src.get("radius", 0.2), f"{key}.radius", positive=True)
        for k in ("amplitude", "base"):
            if _number(src.get(k, 1.0 if k == "amplitude" else 0.0), f"{key}.{k}") < 0:
                raise ConfigError(f"{key}.{k}", "source must be nonnegative")
    elif kind == "csv":
        _unknown(src, {"type", "path"}, f"{key}.")
        _path(src.get("path"), f"{key}.path", base_dir)
    else:
        raise ConfigError(f"{key}.type", f"unknown source type {kind!r}")


def _validate_sweep(sw):
    _unknown(sw, {"lambdas", "g_sequence"}, "sweep.")
    lambdas = sw.get("lambdas")
    if lambdas is not None:
        if not isinstance(lambdas, list) or not lambdas:
            raise ConfigError("sweep.lambdas", "expected a non-empty list")
        prev = np.inf
        for i, entry in enumerate(lambdas):
            key = f"sweep.lambdas[{i}]"
            if isinstance(entry, dict):
                _unknown(entry, {"lambda"} | _SOLVER_INTS | _SOLVER_FLOATS, f"{key}.")
                lam = _number(entry.get("lambda"), f"{key}.lambda", positive=True)
                for k in _SOLVER_INTS & entry.keys():
                    _integer(entry[k], f"{key}.{k}", minimum=1)
                for k in _SOLVER_FLOATS & entry.keys():
                    _number(entry[k], f"{key}.{k}", positive=True)
            else:
                lam = _number(entry, key, positive=True)
            if lam > 1:
                raise ConfigError(key, f"lambda must lie in (0, 1], got {lam:g}")
            if lam > prev:
                raise ConfigError(key, "lambdas must be descending")
            prev = lam
    gs = sw.get("g_sequence")
    if gs is not None:
        if not isinstance(gs, dict):
            raise ConfigError("sweep.g_sequence", "must be a mapping")
        kind = gs.get("type")
        _unknown(gs, {"type", "n"}, "sweep.g_sequence.")
        if kind not in ("scale", "bump"):
            raise ConfigError("sweep.g_sequence.type", f"expected 'scale' or 'bump', got {kind!r}")
        ns = gs.get("n", [1, 2, 4, 8])
        if not isinstance(ns, list) or not ns:
            raise ConfigError("sweep.g_sequence.n", "expected a non-empty list of integers")
        for i, n in enumerate(ns):
            _integer(n, f"sweep.g_sequence.n[{i}]", minimum=1)


def parse_config(raw: dict, base_dir=".") -> RunConfig:
    """Validate a decoded configuration mapping."""
    base_dir = Path(base_dir)
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "configuration must be a mapping")
    _unknown(raw, _TOP_KEYS, "")
    seed = _integer(raw.get("seed", 42), "seed", minimum=0)
    threads = _integer(raw.get("threads", 0), "threads", minimum=0)
    problem = _section(raw, "problem")
    _validate_problem(problem, base_dir)
    solver = _parse_solver(_section(raw, "solver", required=False))
    solver = dataclasses.replace(solver, seed=seed)
    ver = _section(raw, "verify", required=False)
    _unknown(ver, {"n_tests"}, "verify.")
    n_tests = _integer(ver.get("n_tests", 100), "verify.n_tests", minimum=1)
    solver = dataclasses.replace(solver, n_vi_tests=n_tests)
    sweep = _section(raw, "sweep", required=False)
    _validate_sweep(sweep)
    return RunConfig(problem, solver, seed, threads, n_tests, sweep, base_dir, raw)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("--config", f"file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("<root>", f"not valid YAML: {exc}") from exc
    return parse_config(raw, path.parent)


def _source_field(src, grid, base_dir):
    kind = src["type"]
    if kind == "constant":
        return np.full(grid.size, float(src.get("value", 1.0)))
    if kind == "bump":
        cx, cy = src.get("center", [0.5, 0.5])
        r = float(src.get("radius", 0.2))
        amp, base = float(src.get("amplitude", 1.0)), float(src.get("base", 0.0))
        P = grid.points
        return base + amp * np.exp(-((P[:, 0] - cx) ** 2 + (P[:, 1] - cy) ** 2) / r**2)
    from .io import read_field_csv

    return read_field_csv(_path(src["path"], "problem.source.path", base_dir), grid)


def build_problem(cfg: RunConfig, n: int | None = None) -> ProblemSpec:
    """Construct the :class:`ProblemSpec`; ``n`` overrides ``domain.n_interior``."""
    p, base = cfg.problem, cfg.base_dir
    dom = p["domain"]
    grid = Grid(int(n or dom["n_interior"]), tuple(dom.get("box", (0.0, 1.0, 0.0, 1.0))))
    ctl = p["controls"]
    costs = ctl.get("costs")
    fam = ctl["family"]
    if fam == "isotropic":
        family = IsotropicFamily(ctl["alphas"], costs)
    elif fam == "diagonal":
        family = DiagonalFamily(ctl["diagonals"], costs)
    elif fam == "rotation":
        family = RotationFamily(ctl["angles"], ctl.get("eigenvalues", (1.0, 2.0)), costs, ctl.get("twist", 0.0))
    else:
        family = TabulatedFamily.from_csv(_path(ctl["path"], "problem.controls.path", base), grid)
    cpl = p["coupling"]
    kind = cpl["type"]
    try:
        if kind == "gaussian":
            coupling = KernelCoupling.gaussian(grid, cpl.get("sigma", 0.25), cpl.get("amplitude", 1.0))
        elif kind == "constant":
            coupling = KernelCoupling.constant(grid, cpl.get("value", 1.0))
        elif kind == "tabulated":
            coupling = KernelCoupling.from_csv(_path(cpl["path"], "problem.coupling.path", base), grid)
        else:
            coupling = LocalCoupling(grid, cpl.get("slope", 1.0), np.full(grid.size, float(cpl.get("offset", 0.0))))
        g = _source_field(p["source"], grid, base)
    except ContractViolation as exc:
        raise ConfigError("problem", str(exc)) from exc
    cordes = CordesParams(**{k: float(v) for k, v in p.get("cordes", {}).items()})
    return ProblemSpec(grid, family, coupling, g, cordes, p.get("eta"), p.get("name", "problem"))


def build_sources(cfg: RunConfig, spec: ProblemSpec) -> list:
    """The ``sweep.g_sequence`` sources: ``g (1 + 1/n)`` or ``g + bump / n``."""
    gs = cfg.sweep.get("g_sequence")
    if gs is None:
        return []
    grid = spec.grid
    ns = gs.get("n", [1, 2, 4, 8])
    if gs["type"] == "scale":
        return [spec.g * (1.0 + 1.0 / n) for n in ns]
    P = grid.points
    osc = 1.0 + np.cos(6 * np.pi * P[:, 0]) * np.cos(6 * np.pi * P[:, 1])
    return [spec.g + osc / n for n in ns]
