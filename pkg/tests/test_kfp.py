import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cordes_mfg.errors import ContractViolation, LinearSolverError
from cordes_mfg.grid import Grid
from cordes_mfg.hamiltonian import IsotropicFamily
from cordes_mfg.kfp import (
    SelectionField,
    check_nonnegativity,
    comparison_probe,
    duality_defect,
    is_stencil_monotone,
    solve_kfp,
)


def random_diagonal_field(grid, rng, lo=1.0, hi=2.0):
    d = rng.uniform(lo, hi, size=(grid.size, 2))
    A = np.zeros((grid.size, 2, 2))
    A[:, 0, 0], A[:, 1, 1] = d[:, 0], d[:, 1]
    return SelectionField(grid, A)


def random_rotated_field(grid, rng, lo=1.0, hi=2.0):
    th = rng.uniform(0, np.pi, size=grid.size)
    c, s = np.cos(th), np.sin(th)
    l1, l2 = rng.uniform(lo, hi, size=(2, grid.size))
    A = np.empty((grid.size, 2, 2))
    A[:, 0, 0] = l1 * c**2 + l2 * s**2
    A[:, 1, 1] = l1 * s**2 + l2 * c**2
    A[:, 0, 1] = A[:, 1, 0] = (l1 - l2) * c * s
    return SelectionField(grid, A)


def test_single_node():
    rep = solve_kfp(SelectionField.constant(Grid(1), np.eye(2)), np.array([1.0]))
    assert rep.m[0] == pytest.approx(0.0625, rel=1e-15)


def test_zero_source():
    g = Grid(6)
    rep = solve_kfp(random_rotated_field(g, np.random.default_rng(0)), np.zeros(g.size))
    assert not np.any(rep.m)


def test_self_adjoint_manufactured():
    errs = []
    for n in (16, 32):
        g = Grid(n)
        exact = g.sample(lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y))
        m = solve_kfp(SelectionField.constant(g, np.eye(2)), 2 * np.pi**2 * exact).m
        errs.append(np.abs(m - exact).max())
    assert np.log(errs[0] / errs[1]) / np.log(33 / 17) >= 1.8


def test_identity_positive_density():
    g = Grid(12)
    rep = solve_kfp(SelectionField.constant(g, np.eye(2)), np.ones(g.size))
    assert rep.min_value > 0
    assert check_nonnegativity(rep, np.ones(g.size))["holds"]


def test_mixed_sign_source_is_vacuous():
    g = Grid(8)
    src = g.sample(lambda x, y: x - 0.5)
    rep = solve_kfp(SelectionField.constant(g, np.eye(2)), src)
    out = check_nonnegativity(rep, src)
    assert out["holds"] and out["min_value"] < 0


def test_diagonal_fields_nonnegative_and_monotone_stencil():
    g = Grid(16)
    rng = np.random.default_rng(1)
    for _ in range(20):
        sel = random_diagonal_field(g, rng)
        assert is_stencil_monotone(sel)
        rep = solve_kfp(sel, rng.random(g.size))
        assert check_nonnegativity(rep, np.ones(g.size))["holds"]


def test_rotated_fields_not_stencil_monotone():
    g = Grid(8)
    assert not is_stencil_monotone(random_rotated_field(g, np.random.default_rng(2)))


def test_comparison_probe_examples():
    g = Grid(12)
    out = comparison_probe(SelectionField.constant(g, np.eye(2)), np.ones(g.size))
    assert out["min_value"] > 0
    assert not np.any(comparison_probe(SelectionField.constant(g, np.eye(2)), np.zeros(g.size))["v"])
    coeffs = IsotropicFamily([0.0, 1.0]).on_grid(g)
    rng = np.random.default_rng(3)
    for _ in range(10):
        w = rng.random(g.size)
        sel = SelectionField.from_weights(coeffs, np.column_stack([w, 1 - w]))
        assert comparison_probe(sel, np.ones(g.size))["min_value"] >= -1e-8
    with pytest.raises(ContractViolation):
        comparison_probe(SelectionField.constant(g, np.eye(2)), -np.ones(g.size))


def test_duality_identity_rotated():
    g = Grid(16)
    rng = np.random.default_rng(4)
    sel = random_rotated_field(g, rng)
    src = rng.random(g.size)
    m = solve_kfp(sel, src).m
    for _ in range(20):
        v = rng.standard_normal(g.size)
        Lv = sel.operator() @ v
        scale = g.l2_norm(m) * g.l2_norm(Lv) + g.l2_norm(src) * g.l2_norm(v)
        assert duality_defect(sel, m, src, v) <= 1e-10 * scale


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_linear_in_source(seed, a, b):
    g = Grid(7)
    rng = np.random.default_rng(seed)
    sel = random_rotated_field(g, rng)
    g1, g2 = rng.standard_normal((2, g.size))
    m1, m2 = solve_kfp(sel, g1).m, solve_kfp(sel, g2).m
    m = solve_kfp(sel, a * g1 + b * g2).m
    assert np.allclose(m, a * m1 + b * m2, rtol=0, atol=1e-10 * (1 + np.abs(m1).max() + np.abs(m2).max()) * 10)


def test_stability_constant_grid_stable():
    ratios = []
    for n in (16, 32, 64):
        g = Grid(n)
        A = np.array([[1.5, 0.2], [0.2, 1.2]])
        src = np.ones(g.size)
        m = solve_kfp(SelectionField.constant(g, A), src).m
        ratios.append(g.l2_norm(m) / g.l2_norm(src))
    assert max(ratios) <= 1.2 * min(ratios)


def test_singular_operator_raises():
    g = Grid(4)
    with pytest.raises(LinearSolverError):
        solve_kfp(SelectionField.constant(g, np.zeros((2, 2))), np.ones(g.size))


def test_selection_field_validation():
    g = Grid(2)
    with pytest.raises(ContractViolation):
        SelectionField(g, np.zeros((3, 2, 2)))
    with pytest.raises(ContractViolation):
        SelectionField(g, np.broadcast_to(np.array([[1.0, 1.0], [0.0, 1.0]]), (4, 2, 2)))
