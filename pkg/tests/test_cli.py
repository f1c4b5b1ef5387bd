import csv
import json
import shutil

import numpy as np
import pytest
import yaml

from cordes_mfg import io
from cordes_mfg.cli import main
from cordes_mfg.errors import ConfigError
from cordes_mfg.config import load_config, parse_config
from cordes_mfg.grid import Grid

from .conftest import CONFIGS


def write_cfg(path, raw):
    path.write_text(yaml.safe_dump(raw))
    return path


def small_reference(tmp_path, n=12, **updates):
    raw = yaml.safe_load((CONFIGS / "reference.yaml").read_text())
    raw["problem"]["domain"]["n_interior"] = n
    for key, val in updates.items():
        raw[key] = val
    return write_cfg(tmp_path / "cfg.yaml", raw)


@pytest.fixture(scope="module")
def solved(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("solve")
    cfg = small_reference(tmp)
    out = tmp / "out"
    assert main(["solve", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_trivial_config(tmp_path):
    out = tmp_path / "o"
    assert main(["solve", "--config", str(CONFIGS / "trivial.yaml"), "--out", str(out)]) == 0
    assert all(float(r["value"]) == 0.0 for r in read_rows(out / "m.csv"))


def test_reference_config_end_to_end(tmp_path):
    out = tmp_path / "o"
    assert main(["solve", "--config", str(CONFIGS / "reference.yaml"), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "ok" and summary["schema_version"] == io.SCHEMA_VERSION
    assert summary["diagnostics"]["vi_margin_min"] >= -1e-8
    for name in ("u.csv", "m.csv", "policy.csv", "weights.csv", "run_log.jsonl"):
        assert (out / name).is_file()
    events = [json.loads(line)["event"] for line in (out / "run_log.jsonl").read_text().splitlines()]
    assert events.count("fp_iter") == len(summary["fp_history"]) and "selection" in events


@pytest.mark.parametrize(
    "section,key,value,expected",
    [
        ("solver", "tol_fp", -1e-8, "solver.tol_fp"),
        ("solver", "theta_fp", 1.5, "solver.theta_fp"),
        ("solver", "max_fp_iter", 0, "solver.max_fp_iter"),
        ("solver", "bogus", 1, "solver.bogus"),
    ],
)
def test_malformed_config_names_key(tmp_path, capsys, section, key, value, expected):
    raw = yaml.safe_load((CONFIGS / "reference.yaml").read_text())
    raw[section][key] = value
    cfg = write_cfg(tmp_path / "bad.yaml", raw)
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert expected in capsys.readouterr().err
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["status"] == "config_error" and summary["key"] == expected


@pytest.mark.parametrize(
    "mutate,key",
    [
        (lambda r: r["problem"]["domain"].update(n_interior=0), "problem.domain.n_interior"),
        (lambda r: r["problem"]["cordes"].update(epsilon=2.0), "problem.cordes"),
        (lambda r: r["problem"]["coupling"].update(type="nope"), "problem.coupling.type"),
        (lambda r: r["problem"]["source"].update(value=-1.0), "problem.source.value"),
        (lambda r: r["problem"]["controls"].update(family="tabulated", path="missing.csv"), "problem.controls"),
        (lambda r: r.update(sweep={"lambdas": [0.01, 0.1]}), "sweep.lambdas[1]"),
    ],
)
def test_config_validation_keys(mutate, key):
    raw = yaml.safe_load((CONFIGS / "reference.yaml").read_text())
    mutate(raw)
    with pytest.raises(ConfigError) as info:
        parse_config(raw, CONFIGS)
    assert info.value.key.startswith(key)


def test_missing_config_file(tmp_path):
    assert main(["solve", "--config", str(tmp_path / "none.yaml"), "--out", str(tmp_path / "o")]) == 1


def test_determinism_bit_identical(tmp_path, solved):
    cfg, out = solved
    out2 = tmp_path / "again"
    assert main(["solve", "--config", str(cfg), "--out", str(out2)]) == 0
    for name in ("u.csv", "m.csv", "policy.csv", "weights.csv"):
        assert (out / name).read_bytes() == (out2 / name).read_bytes()


def test_seed_and_threads_flags(tmp_path, solved):
    cfg, out = solved
    out2 = tmp_path / "seeded"
    assert main(["solve", "--config", str(cfg), "--out", str(out2), "--seed", "7", "--threads", "1"]) == 0
    assert json.loads((out2 / "summary.json").read_text())["seed"] == 7
    assert (out / "m.csv").read_bytes() == (out2 / "m.csv").read_bytes()


def test_verify_round_trip(tmp_path, solved):
    cfg, out = solved
    assert main(["verify", "--config", str(cfg), "--solution", str(out), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "verify.json").read_text())
    assert report["status"] == "ok"
    assert all(c["pass"] for c in report["checks"].values())


def copy_solution(src, dst):
    shutil.copytree(src, dst)
    return dst


def test_verify_corrupt_density(tmp_path, solved):
    cfg, out = solved
    bad = copy_solution(out, tmp_path / "bad")
    grid = Grid(12)
    m = io.read_field_csv(bad / "m.csv", grid)
    m[5] = -1.0
    io.write_field_csv(bad / "m.csv", grid, m)
    assert main(["verify", "--config", str(cfg), "--solution", str(bad)]) == 2
    checks = json.loads((bad / "verify.json").read_text())["checks"]
    assert not checks["nonnegativity"]["pass"]


def test_verify_perturbed_value_function(tmp_path, solved):
    cfg, out = solved
    bad = copy_solution(out, tmp_path / "bad")
    grid = Grid(12)
    u = io.read_field_csv(bad / "u.csv", grid)
    bump = grid.sample(lambda x, y: np.exp(-((x - 0.5) ** 2 + (y - 0.5) ** 2) / 0.05))
    io.write_field_csv(bad / "u.csv", grid, u + 1e-3 * bump)
    assert main(["verify", "--config", str(cfg), "--solution", str(bad)]) == 2
    checks = json.loads((bad / "verify.json").read_text())["checks"]
    assert not checks["hjb_consistency"]["pass"]


def test_verify_missing_or_mismatched_files(tmp_path, solved):
    cfg, out = solved
    bad = copy_solution(out, tmp_path / "bad")
    (bad / "u.csv").unlink()
    assert main(["verify", "--config", str(cfg), "--solution", str(bad)]) == 1
    other = small_reference(tmp_path, n=10)
    assert main(["verify", "--config", str(other), "--solution", str(out), "--out", str(tmp_path / "v")]) == 1


def test_sweep_single_lambda(tmp_path):
    cfg = small_reference(tmp_path, sweep={"lambdas": [0.01]})
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    rows = read_rows(tmp_path / "s" / "sweep.csv")
    assert len(rows) == 1 and rows[0]["status"] == "ok" and float(rows[0]["u_error"]) > 0


def test_sweep_four_lambdas_bound(tmp_path):
    cfg = small_reference(tmp_path, sweep={"lambdas": [0.1, 0.01, 0.001, 0.0001]})
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    rows = read_rows(tmp_path / "s" / "sweep.csv")
    lams = [float(r["lambda"]) for r in rows]
    assert lams == sorted(lams, reverse=True)
    for r in rows:
        assert float(r["envelope_gap"]) <= float(r["bound"]) + 1e-10


def test_sweep_planted_failure(tmp_path):
    cfg = small_reference(tmp_path, sweep={"lambdas": [0.1, {"lambda": 0.01, "max_fp_iter": 1}]})
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 3
    rows = read_rows(tmp_path / "s" / "sweep.csv")
    assert rows[0]["status"] == "ok" and rows[1]["status"].startswith("failed")


def test_sweep_needs_section(tmp_path):
    cfg = small_reference(tmp_path)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 1


def test_g_sequence_sweep(tmp_path):
    cfg = small_reference(tmp_path, sweep={"g_sequence": {"type": "scale", "n": [1, 2, 4]}})
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    gaps = [float(r["u_gap"]) for r in read_rows(tmp_path / "s" / "g_sweep.csv")]
    assert gaps[0] > gaps[1] > gaps[2]


def test_check_cordes(tmp_path):
    assert main(["check-cordes", "--config", str(CONFIGS / "reference.yaml"), "--out", str(tmp_path)]) == 0
    raw = yaml.safe_load((CONFIGS / "reference.yaml").read_text())
    raw["problem"]["cordes"]["nu_upper"] = 1.5
    cfg = write_cfg(tmp_path / "c.yaml", raw)
    assert main(["check-cordes", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 2
    report = json.loads((tmp_path / "c" / "cordes.json").read_text())["report"]
    assert report["n_failures"] == 32 * 32


def test_solve_precondition_failure_exit_code(tmp_path):
    raw = yaml.safe_load((CONFIGS / "reference.yaml").read_text())
    raw["problem"]["domain"]["n_interior"] = 8
    raw["problem"]["cordes"]["nu_upper"] = 1.5
    cfg = write_cfg(tmp_path / "c.yaml", raw)
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert json.loads((tmp_path / "o" / "summary.json").read_text())["status"] == "precondition_failure"


def test_solver_failure_exit_code(tmp_path):
    cfg = small_reference(tmp_path, solver={"max_fp_iter": 1, "policy_jump": False})
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["status"] == "solver_failure" and len(summary["fp_history"]) == 1


def test_field_round_trip_17_digits(tmp_path):
    g = Grid(7, (0.0, 1.3, -1.0, 2.0))
    vals = np.random.default_rng(0).standard_normal(g.size) * 10.0 ** np.arange(-20, 29)[: g.size]
    io.write_field_csv(tmp_path / "f.csv", g, vals)
    assert np.array_equal(io.read_field_csv(tmp_path / "f.csv", g), vals)
    w = np.random.default_rng(1).dirichlet([1, 1, 1], size=g.size)
    io.write_weights_csv(tmp_path / "w.csv", g, w)
    assert np.array_equal(io.read_weights_csv(tmp_path / "w.csv", g, 3), w)
    pol = np.arange(g.size) % 3
    io.write_policy_csv(tmp_path / "p.csv", g, pol)
    assert np.array_equal(io.read_policy_csv(tmp_path / "p.csv", g), pol)


def test_shipped_configs_parse():
    for path in CONFIGS.glob("*.yaml"):
        load_config(path)


def test_log_level_env(tmp_path, monkeypatch):
    monkeypatch.setenv("MFG_LOG_LEVEL", "debug")
    assert main(["solve", "--config", str(CONFIGS / "trivial.yaml"), "--out", str(tmp_path)]) == 0
