import math

import numpy as np
import pytest
from scipy.integrate import trapezoid

from evofam.core import BetaProfile, CoefficientFamily, Space, TimeGrid, TimeProfile
from evofam.fundsol import FundamentalSolutionField, s_axiom_residuals
from evofam.perturbation import (
    MemoryBudgetExceeded,
    MissingColumns,
    PerturbedPropagatorField,
    PicardError,
    assemble_B,
    direct_oracle,
    duhamel_second_form_residual,
    first_picard_correction,
    oracle_gap,
    perturbed_axiom_suite,
    solve_volterra,
    solve_volterra_field,
)
from evofam.reduction import u_axiom_residuals, weighted_operator_norm

from conftest import AFFINE, CONST, XI, XI_SMALL, family


def xi_matrix(N):
    """(2/pi) int_0^pi xi sin(n xi) sin(m xi) dxi in closed form."""
    out = np.empty((N, N))
    for n in range(1, N + 1):
        for m in range(1, N + 1):
            if n == m:
                out[n - 1, m - 1] = math.pi / 2
            else:
                k, l = n - m, n + m
                out[n - 1, m - 1] = (((-1) ** k - 1) / k**2 - ((-1) ** l - 1) / l**2) / math.pi
    return out


def quadrature_oracle(N, points=10**6):
    xi = np.linspace(0, math.pi, points + 1)
    z = math.sqrt(2 / math.pi) * np.sin(np.outer(np.arange(1, N + 1), xi))
    return np.array([[trapezoid(xi * z[m] * z[n], xi) for n in range(N)] for m in range(N)])


@pytest.fixture(scope="module")
def a4():
    cf = family(AFFINE, XI_SMALL)
    g = TimeGrid(1.0, 200)
    u = FundamentalSolutionField.build(cf, g, 8)
    b = assemble_B(cf, 8, g)
    return cf, g, u, b


@pytest.fixture(scope="module")
def a4_field(a4):
    cf, g, u, b = a4
    return solve_volterra_field(u, b)


def test_zero_perturbation_is_trivial():
    cf = family(AFFINE)
    g = TimeGrid(1.0, 30)
    u = FundamentalSolutionField.build(cf, g, 4)
    b = assemble_B(cf, 4, g)
    assert not np.any(b.matrices)
    col = solve_volterra(u, b, 0.2)
    assert col.iterations == 0
    assert np.array_equal(col.V[6:], u.propagator(np.arange(6, 31), 6))
    v = solve_volterra_field(u, b)
    assert duhamel_second_form_residual(u, b, v, 0.0) == 0.0


def test_xi_matrix_closed_form():
    cf = family(CONST, XI)
    B = assemble_B(cf, 8, TimeGrid(1.0, 2)).matrices[0]
    assert np.allclose(B, xi_matrix(8), atol=1e-8)
    assert B[0, 1] == pytest.approx(-16 / (9 * math.pi), abs=1e-8)
    assert abs(B[0, 2]) <= 1e-10
    assert np.array_equal(B, B.T)


def test_closed_form_agrees_with_dense_quadrature():
    assert np.allclose(quadrature_oracle(5), xi_matrix(5), atol=1e-10)


def test_separable_factorization():
    g_spec = {"family": "affine", "params": {"a": 0.5, "b": 2.0}}
    cf = family(CONST, ("separable", {"g": g_spec, "p": [1.0, 0.0, -0.2]}))
    grid = TimeGrid(1.0, 10)
    b = assemble_B(cf, 6, grid)
    for i, t in enumerate(grid.nodes):
        assert np.allclose(b.matrices[i], (0.5 + 2.0 * t) * b.spatial, atol=1e-15)
    assert np.allclose(b.at(0.37), (0.5 + 2.0 * 0.37) * b.spatial)


def test_table_beta_reproduces_cubic_samples():
    t = np.linspace(0, 1, 6)
    xi = np.linspace(0, math.pi, 9)
    values = (1 + t)[:, None] * xi[None, :]
    beta = BetaProfile.make("table", t=t.tolist(), xi=xi.tolist(), values=values.tolist())
    cf = CoefficientFamily(TimeProfile.make("constant", c=1.0), beta, 1.0)
    grid = TimeGrid(1.0, 4)
    b = assemble_B(cf, 5, grid)
    for i, tt in enumerate(grid.nodes):
        assert np.allclose(b.matrices[i], (1 + tt) * xi_matrix(5), atol=1e-8)


def test_continuity_modulus():
    grid = TimeGrid(1.0, 20)
    assert assemble_B(family(CONST, XI), 4, grid).continuity_modulus(Space.X) == 0.0
    g_spec = {"family": "affine", "params": {"a": 0.0, "b": 1.0}}
    b = assemble_B(family(CONST, ("separable", {"g": g_spec, "p": [0.0, 1.0]})), 4, grid)
    spatial_norm = np.linalg.norm(b.spatial, 2)
    assert b.continuity_modulus(Space.X) == pytest.approx(grid.h * spatial_norm, rel=1e-12)
    assert b.continuity_modulus(Space.Z) > 0


def test_identity_on_the_diagonal(a4_field):
    for j in (0, 57, 200):
        assert np.array_equal(a4_field.columns[j][j], np.eye(16))


def test_unit_alpha_xi_against_direct_oracle():
    # the gap is the O(h^2) trapezoidal product-integration error:
    # 2.17e-5 at M = 200, shrinking by 4 per doubling of M
    cf = family(CONST, XI)
    gaps = []
    for M in (200, 400):
        g = TimeGrid(1.0, M)
        u = FundamentalSolutionField.build(cf, g, 8)
        b = assemble_B(cf, 8, g)
        col = solve_volterra(u, b, 0.0)
        gaps.append(oracle_gap(col.V, direct_oracle(cf, b, 0.0, g)))
        if M == 200:
            v = solve_volterra_field(u, b)
            assert duhamel_second_form_residual(u, b, v, 0.0) <= 5e-6
    assert gaps[0] == pytest.approx(2.174e-5, rel=1e-2)
    assert 3.9 <= gaps[0] / gaps[1] <= 4.1


def test_direct_oracle_harmonic_rotation():
    cf = family(CONST, T=math.pi)
    g = TimeGrid(math.pi, 8)
    V = direct_oracle(cf, assemble_B(cf, 3, g), 0.0, g)
    theta = g.nodes[3]
    for n in (1, 2, 3):
        block = V[3][np.ix_([n - 1, n + 2], [n - 1, n + 2])]
        expected = [[math.cos(n * theta), math.sin(n * theta) / n], [-n * math.sin(n * theta), math.cos(n * theta)]]
        assert np.allclose(block, expected, atol=1e-8)


def test_direct_oracle_degenerate_interval(a4):
    cf, g, u, b = a4
    V = direct_oracle(cf, b, 1.0, g)
    assert np.array_equal(V[-1], np.eye(16))
    assert not np.any(V[:-1])


def test_duhamel_degenerate_interval_and_missing_columns(a4, a4_field):
    cf, g, u, b = a4
    assert duhamel_second_form_residual(u, b, a4_field, 1.0) == 0.0
    partial = PerturbedPropagatorField(u, b)
    partial.prepare([0, 1])
    with pytest.raises(MissingColumns):
        duhamel_second_form_residual(u, b, partial, 0.0)


def test_picard_contracts(a4):
    cf, g, u, b = a4
    col = solve_volterra(u, b, 0.0)
    ratios = col.contraction_ratios()
    assert col.iterations <= 30
    assert all(r < 1 for r in ratios)
    assert col.increments[-1] <= 1e-10


def test_picard_failure_reports_last_increment(a4):
    cf, g, u, b = a4
    with pytest.raises(PicardError) as info:
        solve_volterra(u, b, 0.0, max_iter=2)
    assert info.value.iterations == 2
    assert 0 < info.value.last_increment < 1


def test_field_columns_match_single_column_solves(a4, a4_field):
    cf, g, u, b = a4
    for s in (0.0, 0.5):
        col = solve_volterra(u, b, s)
        j = g.index(s)
        assert np.max(weighted_operator_norm(col.V - a4_field.columns[j])) <= 1e-9


def test_memory_budget(a4):
    cf, g, u, b = a4
    with pytest.raises(MemoryBudgetExceeded):
        solve_volterra_field(u, b, memory_budget=10**5)
    v = solve_volterra_field(u, b, bases=[0, 100], memory_budget=10**5)
    assert sorted(v.columns) == [0, 100]


def test_first_order_linearity_in_the_perturbation():
    g = TimeGrid(1.0, 100)
    cf1 = family(AFFINE, XI)
    u = FundamentalSolutionField.build(cf1, g, 6)
    U = u.propagator(np.arange(101), 0)
    c1 = first_picard_correction(u, assemble_B(cf1, 6, g), 0.0)
    defects = []
    for eps in (0.1, 0.05):
        spec = {"g": {"family": "constant", "params": {"c": eps}}, "p": [0.0, 1.0]}
        cf = family(AFFINE, ("separable", spec))
        V = solve_volterra(u, assemble_B(cf, 6, g), 0.0).V
        defects.append(float(np.max(weighted_operator_norm(V - U - eps * c1))))
    assert 3.5 <= defects[0] / defects[1] <= 4.5


def test_zero_perturbation_suite_equals_unperturbed():
    cf = family(AFFINE)
    g = TimeGrid(1.0, 60)
    u = FundamentalSolutionField.build(cf, g, 6)
    b = assemble_B(cf, 6, g)
    rep = perturbed_axiom_suite(PerturbedPropagatorField(u, b), cf, b)
    ref_u, ref_s = u_axiom_residuals(u), s_axiom_residuals(u)
    for name, entry in ref_u.entries.items():
        assert abs(rep["V_" + name].residual - entry.residual) <= 1e-12
    for name, entry in ref_s.entries.items():
        assert abs(rep["SV_" + name].residual - entry.residual) <= 1e-12


def test_perturbed_suite_at_moderate_resolution(a4):
    cf, g, u, b = a4
    rep = perturbed_axiom_suite(PerturbedPropagatorField(u, b), cf, b)
    assert rep["V_U1_identity"].residual == 0.0
    thresholded = [e for e in rep.entries.values() if e.tolerance is not None]
    assert all(e.residual <= 1e-3 for e in thresholded)


@pytest.mark.slow
def test_perturbed_composition_law_at_two_resolutions(a4_field):
    assert u_axiom_residuals(a4_field)["U1_composition"].residual <= 1e-3
    cf = family(AFFINE, XI_SMALL)
    g = TimeGrid(1.0, 400)
    u = FundamentalSolutionField.build(cf, g, 8)
    v = PerturbedPropagatorField(u, assemble_B(cf, 8, g))
    assert u_axiom_residuals(v)["U1_composition"].residual <= 2.5e-4
