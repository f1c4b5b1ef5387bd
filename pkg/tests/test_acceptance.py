"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import time

import numpy as np

from cordes_mfg.cli import main
from cordes_mfg.config import build_problem
from cordes_mfg.grid import Grid
from cordes_mfg.hamiltonian import (
    ControlSet,
    CordesParams,
    FunctionFamily,
    IsotropicFamily,
    RotationFamily,
    cordes_batch,
    envelope_batch,
    eval_hamiltonian,
    subdifferential_vertices,
)
from cordes_mfg.hjb import solve_hjb
from cordes_mfg.kfp import SelectionField, comparison_probe, solve_kfp
from cordes_mfg.mfg import regularization_sweep, uniqueness_experiment, verify_vi
from cordes_mfg.selection import optimize_selection

from .conftest import CONFIGS, random_symmetric, record_criterion


def _constant_family(a, f):
    K = len(f)
    return FunctionFamily(
        lambda p: np.broadcast_to(a, (len(p), K, 2, 2)),
        lambda p: np.broadcast_to(f, (len(p), K)),
        ControlSet([f"c{k}" for k in range(K)]),
    )


def _brute(a, f, M):
    best = -np.inf
    for k in range(len(f)):
        acc = 0.0
        for i in range(2):
            for j in range(2):
                acc += float(a[k][i][j]) * float(M[i][j])
        best = max(best, -acc - float(f[k]))
    return best


def test_criterion_01_hamiltonian_oracle():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    mismatches, violations, worst = 0, 0, -np.inf
    for _ in range(1000):
        K = int(rng.integers(1, 8))
        B = rng.normal(size=(K, 2, 2))
        a = np.einsum("kij,klj->kil", B, B) + 0.1 * np.eye(2)
        f = rng.normal(size=K)
        fam = _constant_family(a, f)
        x = rng.random(2)
        M = random_symmetric(rng, scale=3.0)
        H = eval_hamiltonian(fam, x, M, eta=0.0).value
        mismatches += H != _brute(a, f, M)
        N = random_symmetric(rng, size=100, scale=3.0)
        HN = (-np.einsum("kij,nij->nk", a, N) - f).max(axis=1)
        for V in subdifferential_vertices(fam, x, M, eta=0.0):
            excess = H + np.einsum("ij,nij->n", V, N - M) - HN
            rel = excess / (1.0 + np.abs(HN) + abs(H))
            worst = max(worst, rel.max())
            violations += int(np.sum(rel > 1e-12))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and violations == 0 and elapsed < 5.0
    record_criterion(1, "Hamiltonian oracle equivalence", ok,
                     f"mismatches={mismatches} subgradient_violations={violations} worst_rel={worst:.2e} time={elapsed:.2f}s")
    assert ok


def test_criterion_02_manufactured_hjb():
    errs, times = [], []
    for n in (16, 32, 64):
        g = Grid(n)
        exact = g.sample(lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y))
        t0 = time.perf_counter()
        rep = solve_hjb(IsotropicFamily([0.0]).on_grid(g), 2 * np.pi**2 * exact)
        times.append(time.perf_counter() - t0)
        errs.append(np.abs(rep.u - exact).max())
    hs = [1 / 17, 1 / 33, 1 / 65]
    orders = [np.log(errs[i] / errs[i + 1]) / np.log(hs[i] / hs[i + 1]) for i in range(2)]
    ok = min(orders) >= 1.8 and max(times) < 10.0
    record_criterion(2, "manufactured HJB convergence", ok,
                     f"errors={[f'{e:.3e}' for e in errs]} orders={[f'{o:.3f}' for o in orders]} max_time={max(times):.3f}s")
    assert ok


def test_criterion_03_kfp_duality(reference_spec, reference_solution):
    rng = np.random.default_rng(103)
    grid = reference_spec.grid
    th = rng.uniform(0, np.pi, size=grid.size)
    c, s = np.cos(th), np.sin(th)
    A = np.empty((grid.size, 2, 2))
    A[:, 0, 0] = c**2 + 2 * s**2
    A[:, 1, 1] = s**2 + 2 * c**2
    A[:, 0, 1] = A[:, 1, 0] = -c * s
    cases = [
        (reference_solution.selection, reference_spec.g),
        (SelectionField(grid, A), rng.random(grid.size)),
        (SelectionField.constant(grid, np.eye(2)), rng.standard_normal(grid.size)),
    ]
    worst = 0.0
    for sel, src in cases:
        m = solve_kfp(sel, src).m
        L = sel.operator()
        for _ in range(20):
            v = rng.standard_normal(grid.size)
            Lv = L @ v
            defect = abs(grid.inner_product(m, Lv) - grid.inner_product(src, v))
            scale = grid.l2_norm(m) * grid.l2_norm(Lv)
            worst = max(worst, defect / scale)
    ok = worst <= 1e-10
    record_criterion(3, "KFP duality identity", ok, f"worst defect/(|m||Lv|)={worst:.2e} over 60 draws")
    assert ok


def test_criterion_04_comparison_principle():
    rng = np.random.default_rng(104)
    grid = Grid(24)
    params = CordesParams(1.0, 2.0, 0.5)
    min_m, min_v = np.inf, np.inf
    for _ in range(20):
        A = np.zeros((grid.size, 2, 2))
        A[:, 0, 0], A[:, 1, 1] = rng.uniform(1.0, 2.0, size=(2, grid.size))
        el, co, _ = cordes_batch(A, params)
        assert el.all() and co.all()
        sel = SelectionField(grid, A)
        src = rng.random(grid.size)
        min_m = min(min_m, solve_kfp(sel, src).m.min())
        min_v = min(min_v, comparison_probe(sel, src)["min_value"])
    # anisotropic fields: magnitudes only
    aniso = []
    for _ in range(20):
        th = rng.uniform(0, np.pi, size=grid.size)
        c, s = np.cos(th), np.sin(th)
        l1, l2 = rng.uniform(1.0, 2.0, size=(2, grid.size))
        A = np.empty((grid.size, 2, 2))
        A[:, 0, 0] = l1 * c**2 + l2 * s**2
        A[:, 1, 1] = l1 * s**2 + l2 * c**2
        A[:, 0, 1] = A[:, 1, 0] = (l1 - l2) * c * s
        sel = SelectionField(grid, A)
        src = rng.random(grid.size)
        aniso.append(min(0.0, solve_kfp(sel, src).m.min(), comparison_probe(sel, src)["min_value"]))
    ok = min_m >= -1e-8 and min_v >= -1e-8
    record_criterion(4, "comparison principle (diagonal Cordes fields)", ok,
                     f"min_m={min_m:.3e} min_v={min_v:.3e}; anisotropic worst violation={min(aniso):.3e} (report only)")
    assert ok


def test_criterion_05_vi_margin(reference_spec, reference_solution):
    out = verify_vi(reference_spec, reference_solution, n_tests=100, seed=42)
    ok = out["margin_min"] >= -1e-8
    record_criterion(5, "VI margin at computed solution", ok,
                     f"margin_min={out['margin_min']:.3e} raw_min={out['margin_raw_min']:.3e} n_tests=100")
    assert ok


def test_criterion_06_minimax_selection(reference_spec, reference_solution):
    spec, sol = reference_spec, reference_solution
    gnorm = np.linalg.norm(spec.g)
    rep = optimize_selection(spec.coefficients, sol.u, sol.m, spec.g)
    grid = Grid(32)
    coeffs = IsotropicFamily([0.0, 1.0]).on_grid(grid)
    src = np.ones(grid.size)
    m = solve_kfp(SelectionField.constant(grid, 1.5 * np.eye(2)), src).m
    planted = optimize_selection(coeffs, np.zeros(grid.size), m, src)
    ok = rep.J_value <= 1e-6 * gnorm and planted.J_value <= 1e-8 * np.linalg.norm(src)
    record_criterion(6, "minimax selection", ok,
                     f"reference J/|g|={rep.J_value / gnorm:.2e} planted J/|g|={planted.J_value / np.linalg.norm(src):.2e}")
    assert ok


def test_criterion_07_uniqueness(reference_spec, reference_config):
    rng = np.random.default_rng(107)
    N = reference_spec.grid.size
    inits = [np.zeros(N), rng.random(N), 50.0 * rng.random(N)]
    out = uniqueness_experiment(reference_spec, inits, reference_config.solver)
    ok = out["max_pairwise_gap"] <= 1e-6 and out["max_cross_pairing"] <= 1e-8
    record_criterion(7, "uniqueness under strict monotonicity", ok,
                     f"max_gap={out['max_pairwise_gap']:.3e} cross_pairing={out['max_cross_pairing']:.3e}")
    assert ok


def test_criterion_08_moreau_bound():
    rng = np.random.default_rng(108)
    families = [IsotropicFamily([0.0, 1.0]), RotationFamily([0.0, 0.5, 1.1, 2.0], (1.0, 2.0), [0.0, 0.3, -0.2, 0.1], 0.8)]
    worst_excess, checked = -np.inf, 0
    for fam in families:
        for lam in (1.0, 0.1, 0.01, 0.001):
            pts = rng.random((10_000, 2))
            a, f = fam.on_points(pts)
            M = random_symmetric(rng, size=10_000, scale=5.0)
            H = (-np.einsum("nkij,nij->nk", a, M) - f).max(axis=1)
            Hl = envelope_batch(a, f, M, lam)[0]
            L = np.sqrt(np.einsum("nkij,nkij->nk", a, a)).max()
            worst_excess = max(worst_excess, (np.abs(H - Hl) - 0.5 * L**2 * lam).max())
    # gradient versus central differences where the dual solution is unique
    fam = families[1]
    basis = np.array([[[1.0, 0.0], [0.0, 0.0]], [[0.0, 1.0], [1.0, 0.0]], [[0.0, 0.0], [0.0, 1.0]]])
    worst_fd = 0.0
    while checked < 50:
        x = rng.random((1, 2))
        a, f = fam.on_points(x)
        M = random_symmetric(rng, size=1, scale=2.0)
        lam = 0.1
        _, grad, w, _ = envelope_batch(a, f, M, lam)
        scores = -np.einsum("nkij,nij->nk", a, M) - f
        top = np.sort(scores, axis=1)
        if top[0, -1] - top[0, -2] < 1e-3 and w.max() > 1 - 1e-9:
            continue  # near a kink of the active set
        step = 1e-5
        E = basis[None]
        Mp = M[:, None] + step * E
        Mm = M[:, None] - step * E
        vp = envelope_batch(np.repeat(a, 3, 0), np.repeat(f, 3, 0), Mp[0], lam)[0]
        vm = envelope_batch(np.repeat(a, 3, 0), np.repeat(f, 3, 0), Mm[0], lam)[0]
        fd = (vp - vm) / (2 * step)
        exact = np.einsum("ij,kij->k", grad[0], basis)
        worst_fd = max(worst_fd, (np.abs(fd - exact) / np.maximum(1.0, np.abs(exact))).max())
        checked += 1
    ok = worst_excess <= 1e-10 and worst_fd <= 1e-5
    record_criterion(8, "Moreau-Yosida bound and gradient", ok,
                     f"max(gap - L^2 lam/2)={worst_excess:.2e} fd_rel_err={worst_fd:.2e}")
    assert ok


def test_criterion_09_regularization_convergence(reference_spec, reference_solution, reference_config):
    t0 = time.perf_counter()
    lambdas = [1e-1, 1e-2, 1e-3, 1e-4]
    res = regularization_sweep(reference_spec, lambdas, reference_config.solver, base=reference_solution)
    elapsed = time.perf_counter() - t0
    errs = res.u_errors
    tol_fp = reference_spec.fp_tolerance()
    non_increasing = bool(res.monotone_decrease)
    final_ok = errs[-1] <= 10 * tol_fp
    ok = non_increasing and final_ok and elapsed < 300
    record_criterion(9, "regularization convergence", ok,
                     f"u_errors={[f'{e:.3e}' for e in errs]} non_increasing={non_increasing} "
                     f"final={errs[-1]:.3e} vs 10*tol_fp={10 * tol_fp:.3e} time={elapsed:.1f}s")
    assert ok


def test_criterion_10_a_priori_bound(reference_config):
    from cordes_mfg.mfg import solve_mfg

    ratios = {}
    for n in (16, 32, 64):
        spec = build_problem(reference_config, n=n)
        sol = solve_mfg(spec, reference_config.solver)
        ratios[n] = spec.grid.l2_norm(sol.m) / spec.grid.l2_norm(spec.g)
    spread = max(abs(r / ratios[32] - 1.0) for r in ratios.values())
    ok = spread <= 0.2
    record_criterion(10, "a priori bound shadow", ok,
                     f"C_obs={ {n: round(r, 6) for n, r in ratios.items()} } max deviation from n=32: {spread:.2%}")
    assert ok


def test_criterion_11_determinism(tmp_path):
    cfg = str(CONFIGS / "reference.yaml")
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["solve", "--config", cfg, "--out", str(o), "--seed", "42"]) for o in outs]
    names = ["u.csv", "m.csv", "policy.csv", "weights.csv"]
    same = all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names)
    ok = codes == [0, 0] and same
    record_criterion(11, "determinism", ok, f"exit codes={codes} identical CSVs={same}")
    assert ok
