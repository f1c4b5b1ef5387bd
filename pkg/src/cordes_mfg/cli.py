"""Command-line entry point: ``cordes-mfg {solve,verify,sweep,check-cordes}``.

Exit codes: 0 success, 1 configuration or input-file error, 2 solver failure
or failed hard check, 3 partial sweep failure.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import RunConfig, build_problem, build_sources, load_config
from .errors import ConfigError, ContractViolation, SolverFailure
from .kfp import sign_tolerance
from .mfg import (
    MfgSolution,
    g_perturbation_study,
    probe_fields,
    regularization_sweep,
    solve_mfg,
    verify_vi,
)
from .selection import directional_selection_check, kfp_residual, optimize_selection

logger = logging.getLogger("cordes_mfg")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_PARTIAL = 0, 1, 2, 3
VI_TOL = 1e-8
SELECTION_TOL = 1e-6

_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    name = os.environ.get("MFG_LOG_LEVEL", "warn").lower()
    logging.basicConfig(
        level=_LEVELS.get(name, logging.WARNING), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    if name not in _LEVELS:
        logger.warning("unknown MFG_LOG_LEVEL %r; using warn", name)


def _thread_limit(threads: int):
    if threads > 0:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=threads)
    return contextlib.nullcontext()


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed", "must be >= 0")
        cfg.seed = args.seed
        cfg.solver = dataclasses.replace(cfg.solver, seed=args.seed)
    if args.threads is not None:
        if args.threads < 0:
            raise ConfigError("--threads", "must be >= 0")
        cfg.threads = args.threads
    return cfg


def _summary(status, command, cfg=None, **extra):
    out = {"schema_version": io.SCHEMA_VERSION, "status": status, "command": command}
    if cfg is not None:
        out["seed"] = cfg.seed
        out["problem"] = cfg.problem.get("name", "problem")
        out["n_interior"] = cfg.problem["domain"]["n_interior"]
    out.update(extra)
    return out


def _write_solution(out: Path, spec, sol: MfgSolution):
    grid = spec.grid
    io.write_field_csv(out / "u.csv", grid, sol.u)
    io.write_field_csv(out / "m.csv", grid, sol.m)
    io.write_policy_csv(out / "policy.csv", grid, sol.policy)
    io.write_weights_csv(out / "weights.csv", grid, sol.weights)


def _fresh_log(out: Path) -> Path:
    path = out / "run_log.jsonl"
    if path.exists():
        path.unlink()
    return path


# -- commands -----------------------------------------------------------------------


def cmd_solve(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cfg = _load(args)
        spec = build_problem(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        io.write_json(out / "summary.json", _summary("config_error", "solve", error=str(exc), key=exc.key))
        return EXIT_CONFIG
    log = _fresh_log(out)
    try:
        with _thread_limit(cfg.threads):
            sol = solve_mfg(spec, cfg.solver)
    except (SolverFailure, ContractViolation) as exc:
        history = getattr(exc, "history", [])
        io.append_jsonl(log, [{"event": "fp_iter", **h} for h in history])
        status = "solver_failure" if isinstance(exc, SolverFailure) else "precondition_failure"
        io.write_json(out / "summary.json", _summary(status, "solve", cfg, error=str(exc), fp_history=history))
        print(f"{status}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    io.append_jsonl(log, [{"event": "fp_iter", **h} for h in sol.fp_history])
    diag = dict(sol.diagnostics)
    io.append_jsonl(
        log,
        [
            {
                "event": "selection",
                "J_value": diag["selection_J"],
                "J_history": diag.pop("selection_J_history"),
                "iterations": diag.get("selection_iterations"),
            },
            {"event": "vi", "margin_min": sol.vi_margin_min},
        ],
    )
    _write_solution(out, spec, sol)
    io.write_json(out / "summary.json", _summary("ok", "solve", cfg, diagnostics=diag, fp_history=sol.fp_history))
    print(f"solved: {len(sol.fp_history)} fixed-point iterations, vi_margin_min={sol.vi_margin_min:.3e}")
    return EXIT_OK


def _verify_checks(cfg, spec, u, m, weights) -> dict:
    grid, coeffs, g = spec.grid, spec.coefficients, spec.g
    opts = cfg.solver
    checks = {}
    ok, worst, failures = coeffs.check_cordes(spec.cordes)
    checks["cordes"] = {"pass": ok, "worst_ratio": worst, "failures": len(failures)}
    tol_sign = sign_tolerance(m)
    nonneg = bool(m.min() >= -tol_sign)
    checks["nonnegativity"] = {"pass": nonneg, "min_m": float(m.min()), "tol_sign": tol_sign}
    F = spec.coupling.apply(m)
    value, optimal, policy = coeffs.hamiltonian(grid.hessian(u), spec.eta)
    tol_hjb = opts.tol_hjb if opts.tol_hjb is not None else 1e-9 * (1.0 + float(np.abs(F).max()))
    res = float(np.abs(value - F).max())
    checks["hjb_consistency"] = {"pass": res <= tol_hjb, "residual_sup": res, "tol": tol_hjb}
    gnorm = float(np.linalg.norm(g))
    w_ok = bool(
        np.all(weights >= 0)
        and np.allclose(weights.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        and np.all(weights[~optimal] == 0)
    )
    J_stored = float(np.linalg.norm(kfp_residual(coeffs, m, g, weights)))
    checks["stored_selection"] = {
        "pass": w_ok and J_stored <= SELECTION_TOL * gnorm,
        "weights_valid": w_ok,
        "J_value": J_stored,
        "tol": SELECTION_TOL * gnorm,
    }
    if nonneg:
        rep = optimize_selection(coeffs, u, m, g, spec.eta, opts.tol_sel, opts.max_sel_iter, initial_policy=policy)
        checks["minimax_selection"] = {
            "pass": rep.J_value <= SELECTION_TOL * gnorm,
            "J_value": rep.J_value,
            "iterations": rep.iterations,
            "tol": SELECTION_TOL * gnorm,
        }
        sol = MfgSolution(u, m, rep.selection, policy, [], weights=rep.weights)
        vi = verify_vi(spec, sol, cfg.n_tests, seed=cfg.seed)
        checks["vi_margin"] = {
            "pass": vi["margin_min"] >= -VI_TOL,
            "margin_min": vi["margin_min"],
            "margin_raw_min": vi["margin_raw_min"],
            "negative_witnesses": vi["witnesses"],
        }
        rng = np.random.default_rng(cfg.seed)
        feas = [
            directional_selection_check(coeffs, u, m, g, rng.standard_normal(grid.size), spec.eta)["feasible"]
            for _ in range(20)
        ]
        checks["directional_selection"] = {"pass": all(feas), "feasible_draws": int(sum(feas)), "draws": 20}
    else:
        msg = "skipped: density has negative entries"
        checks["minimax_selection"] = {"pass": False, "note": msg}
        checks["vi_margin"] = {"pass": False, "note": msg}
        checks["directional_selection"] = {"pass": False, "note": msg}
    checks["probe_pairings"] = {"pass": True, "values": [grid.inner_product(m, phi) for phi in probe_fields(grid)]}
    return checks


def cmd_verify(args) -> int:
    sol_dir = Path(args.solution)
    out = Path(args.out) if args.out else sol_dir
    out.mkdir(parents=True, exist_ok=True)
    try:
        cfg = _load(args)
        spec = build_problem(cfg)
        u = io.read_field_csv(sol_dir / "u.csv", spec.grid)
        m = io.read_field_csv(sol_dir / "m.csv", spec.grid)
        weights = io.read_weights_csv(sol_dir / "weights.csv", spec.grid, spec.coefficients.K)
    except (ConfigError, ContractViolation, FileNotFoundError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        io.write_json(out / "verify.json", _summary("input_error", "verify", error=str(exc)))
        return EXIT_CONFIG
    with _thread_limit(cfg.threads):
        checks = _verify_checks(cfg, spec, u, m, weights)
    passed = all(c["pass"] for c in checks.values())
    io.write_json(out / "verify.json", _summary("ok" if passed else "failed", "verify", cfg, checks=checks))
    for name, c in checks.items():
        print(f"{'PASS' if c['pass'] else 'FAIL'} {name}")
    return EXIT_OK if passed else EXIT_SOLVER


def _lambda_entries(cfg):
    lambdas, overrides = [], {}
    for i, entry in enumerate(cfg.sweep.get("lambdas") or []):
        if isinstance(entry, dict):
            lambdas.append(float(entry["lambda"]))
            overrides[i] = {k: v for k, v in entry.items() if k != "lambda"}
        else:
            lambdas.append(float(entry))
    return lambdas, overrides


def cmd_sweep(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cfg = _load(args)
        if not cfg.sweep.get("lambdas") and not cfg.sweep.get("g_sequence"):
            raise ConfigError("sweep", "needs a lambdas list or a g_sequence section")
        spec = build_problem(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        io.write_json(out / "summary.json", _summary("config_error", "sweep", error=str(exc), key=exc.key))
        return EXIT_CONFIG
    log = _fresh_log(out)
    with _thread_limit(cfg.threads):
        try:
            base = solve_mfg(spec, cfg.solver)
        except (SolverFailure, ContractViolation) as exc:
            io.write_json(
                out / "summary.json",
                _summary("solver_failure", "sweep", cfg, error=str(exc), fp_history=getattr(exc, "history", [])),
            )
            print(f"base solve failed: {exc}", file=sys.stderr)
            return EXIT_SOLVER
        io.append_jsonl(log, [{"event": "base_fp_iter", **h} for h in base.fp_history])
        extra = {}
        failed = False
        lambdas, overrides = _lambda_entries(cfg)
        if lambdas:
            res = regularization_sweep(spec, lambdas, cfg.solver, base=base, overrides=overrides)
            n_probe = len(res.m_gaps[0])
            header = ["lambda", "status", "u_error", "envelope_gap", "bound"] + [f"m_gap_{j}" for j in range(n_probe)]
            rows = [
                [lam, st, ue, eg, b] + list(mg)
                for lam, st, ue, eg, b, mg in zip(
                    res.lambdas, res.status, res.u_errors, res.envelope_gaps, res.bounds, res.m_gaps
                )
            ]
            io.write_table_csv(out / "sweep.csv", header, rows)
            for lam, st, s in zip(res.lambdas, res.status, res.solutions):
                io.append_jsonl(log, [{"event": "sweep_entry", "lambda": lam, "status": st,
                                       "fp_iterations": len(s.fp_history) if s else None}])
            failed |= not res.all_ok or res.monotone_decrease is False
            extra["lambdas"] = {"u_errors": res.u_errors, "envelope_gaps": res.envelope_gaps,
                                "bounds": res.bounds, "status": res.status,
                                "monotone_decrease": res.monotone_decrease}
        sources = build_sources(cfg, spec)
        if sources:
            study = g_perturbation_study(spec, sources, cfg.solver, base=base)
            n_probe = len(probe_fields(spec.grid))
            header = ["n", "status", "g_gap", "u_gap"] + [f"m_gap_{j}" for j in range(n_probe)]
            ns = cfg.sweep["g_sequence"].get("n", [1, 2, 4, 8])
            rows = [
                [n, e["status"], e.get("g_gap", np.nan), e["u_gap"]] + list(e["m_gaps"] or [np.nan] * n_probe)
                for n, e in zip(ns, study)
            ]
            io.write_table_csv(out / "g_sweep.csv", header, rows)
            failed |= any(e["status"] != "ok" for e in study)
            extra["g_sequence"] = study
    status = "partial_failure" if failed else "ok"
    io.write_json(out / "summary.json", _summary(status, "sweep", cfg, base_diagnostics={
        k: v for k, v in base.diagnostics.items() if k != "selection_J_history"}, **extra))
    print(f"sweep {status}")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_check_cordes(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cfg = _load(args)
        spec = build_problem(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    ok, worst, failures = spec.coefficients.check_cordes(spec.cordes)
    report = {
        "pass": ok,
        "worst_ratio": worst,
        "bound": 1.0 / np.sqrt(1.0 + spec.cordes.epsilon),
        "failures": [{"node": p, "control": k} for p, k in failures[:100]],
        "n_failures": len(failures),
        "lipschitz": spec.coefficients.lipschitz,
    }
    io.write_json(out / "cordes.json", _summary("ok" if ok else "failed", "check-cordes", cfg, report=report))
    print(f"{'PASS' if ok else 'FAIL'} cordes worst_ratio={worst:.6g} failures={len(failures)}")
    return EXIT_OK if ok else EXIT_SOLVER


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cordes-mfg", description="Stationary max-type MFG solver and checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default="out"):
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help="BLAS thread cap (0 = library default)")

    common(sub.add_parser("solve", help="solve the coupled system and write fields"))
    pv = sub.add_parser("verify", help="re-check stored solution fields")
    common(pv, out_default=None)
    pv.add_argument("--solution", required=True, help="directory holding u.csv, m.csv, weights.csv")
    common(sub.add_parser("sweep", help="regularization and source-perturbation sweeps"))
    common(sub.add_parser("check-cordes", help="validate coefficients only"))
    return parser


_COMMANDS = {"solve": cmd_solve, "verify": cmd_verify, "sweep": cmd_sweep, "check-cordes": cmd_check_cordes}


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
