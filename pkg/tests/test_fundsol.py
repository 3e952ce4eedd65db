import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evofam.core import Space, SpectralVector, TimeGrid
from evofam.fundsol import (
    FundamentalSolutionField,
    apply_dsS,
    apply_dtdsS,
    apply_dtS,
    apply_S,
    classical_solution,
    s_axiom_residuals,
)
from evofam.perturbation import assemble_B, direct_oracle

from conftest import AFFINE, CONST, family


@pytest.fixture(scope="module")
def harmonic():
    return FundamentalSolutionField.build(family(CONST, T=math.pi), TimeGrid(math.pi, 12), 8)


@pytest.fixture(scope="module")
def affine200():
    return FundamentalSolutionField.build(family(AFFINE), TimeGrid(1.0, 200), 16)


def test_S_vanishes_on_the_diagonal(harmonic):
    x = SpectralVector(np.arange(1.0, 9.0))
    for t in harmonic.grid.nodes[::3]:
        out = apply_S(harmonic, t, t, x)
        assert out.space is Space.Z
        assert not np.any(out.coeffs)


@pytest.mark.parametrize("n, expected", [(1, 1.0), (2, 0.0)])
def test_S_quarter_period(harmonic, n, expected):
    out = apply_S(harmonic, math.pi / 2, 0.0, SpectralVector.unit(n, 8))
    assert out.coeffs[n - 1] == pytest.approx(expected, abs=1e-15)
    assert np.count_nonzero(np.delete(out.coeffs, n - 1)) == 0


def test_derivative_fields_on_the_diagonal(harmonic):
    x = SpectralVector(np.linspace(-1, 1, 8), Space.Z)
    t = harmonic.grid.nodes[5]
    assert np.array_equal(apply_dtS(harmonic, t, t, x).coeffs, x.coeffs)
    assert np.array_equal(apply_dsS(harmonic, t, t, x).coeffs, -x.coeffs)
    assert not np.any(apply_dtdsS(harmonic, t, t, x).coeffs)


def test_mixed_derivative_closed_form(harmonic):
    out = apply_dtdsS(harmonic, math.pi / 3, 0.0, SpectralVector.unit(1, 8, Space.Z))
    assert out.coeffs[0] == pytest.approx(math.sin(math.pi / 3), abs=1e-15)


def test_s_derivatives_need_z_vectors(harmonic):
    x = SpectralVector.unit(1, 8, Space.X)
    with pytest.raises(ValueError):
        apply_dsS(harmonic, 1.0 * math.pi / 2, 0.0, x)
    with pytest.raises(ValueError):
        apply_dtdsS(harmonic, math.pi / 2, 0.0, x)


def test_time_order_enforced(harmonic):
    with pytest.raises(ValueError):
        apply_S(harmonic, 0.0, math.pi / 2, SpectralVector.unit(1, 8))


@pytest.mark.parametrize("x, y, expected", [((1, 0), (0, 0), np.cos), ((0, 0), (1, 0), np.sin)])
def test_classical_solution_closed_form(harmonic, x, y, expected):
    pad = lambda v: np.pad(np.array(v, float), (0, 6))
    u = classical_solution(harmonic, SpectralVector(pad(x), Space.D), SpectralVector(pad(y), Space.Z))
    assert np.allclose(u[:, 0], expected(harmonic.grid.nodes), atol=1e-15)
    assert not np.any(u[:, 1:])


def test_classical_solution_matches_matrix_ode():
    cf = family(AFFINE)
    g = TimeGrid(1.0, 100)
    f = FundamentalSolutionField.build(cf, g, 6)
    x, y = SpectralVector.unit(1, 6, Space.D), SpectralVector.unit(2, 6, Space.Z)
    u = classical_solution(f, x, y)
    V = direct_oracle(cf, assemble_B(cf, 6, g), 0.0, g)
    ref = V[:, :6, :6] @ x.coeffs + V[:, :6, 6:] @ y.coeffs
    assert np.max(np.linalg.norm(u - ref, axis=1)) <= 1e-5
    # u(0) = x and the forward difference of u at 0 approximates y
    assert np.array_equal(u[0], x.coeffs)
    assert np.allclose((u[1] - u[0]) / g.h, y.coeffs, atol=0.05)


def test_constant_alpha_evolution_law_is_exact(harmonic):
    rep = s_axiom_residuals(harmonic)
    assert rep["S4_evolutionary"].residual <= 1e-10
    assert rep["S1a_S_tt_zero"].residual == 0.0


def test_affine_axiom_report(affine200):
    rep = s_axiom_residuals(affine200)
    assert rep.all_passed, rep.failures
    for name in ("S1a_S_tt_zero", "S1c_dtS_tt_identity", "S1d_dsS_tt_minus_identity", "S2c_dtdsS_tt_zero"):
        assert rep[name].residual <= 1e-12
    for name in ("S2a_dtt_S_eq_A_S", "S2b_dss_S_eq_S_A", "S4_evolutionary"):
        assert rep[name].residual <= 1e-4
    for name in ("S3a_dtt_dsS_eq_A_dsS", "S3b_dss_dtS_eq_dtS_A"):
        assert rep[name].residual <= 1e-3


def test_difference_checks_are_second_order(affine200):
    fine = FundamentalSolutionField.build(family(AFFINE), TimeGrid(1.0, 400), 16)
    coarse_rep, fine_rep = s_axiom_residuals(affine200), s_axiom_residuals(fine)
    for name in ("S2a_dtt_S_eq_A_S", "S3a_dtt_dsS_eq_A_dsS", "S3b_dss_dtS_eq_dtS_A"):
        ratio = coarse_rep[name].residual / fine_rep[name].residual
        assert 3.5 <= ratio <= 4.5, (name, ratio)


def test_S_uniformly_bounded_by_one(affine200):
    assert np.max(np.abs(affine200.r)) <= 1.0
    assert s_axiom_residuals(affine200)["lemma_S_sup_X"].residual <= 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 7), st.floats(-3, 3))
def test_S_acts_diagonally(harmonic, k, value):
    base = SpectralVector(np.linspace(0.5, 2.0, 8))
    bumped = base.coeffs.copy()
    bumped[k] += value
    a = apply_S(harmonic, harmonic.grid.nodes[7], harmonic.grid.nodes[2], base).coeffs
    b = apply_S(harmonic, harmonic.grid.nodes[7], harmonic.grid.nodes[2], SpectralVector(bumped)).coeffs
    changed = np.flatnonzero(a != b)
    assert set(changed) <= {k}


def test_threaded_build_is_identical(monkeypatch):
    cf, g = family(AFFINE), TimeGrid(1.0, 40)
    monkeypatch.setenv("EVOFAM_THREADS", "1")
    one = FundamentalSolutionField.build(cf, g, 6)
    monkeypatch.setenv("EVOFAM_THREADS", "3")
    three = FundamentalSolutionField.build(cf, g, 6)
    for q in ("r", "rdot", "c", "cdot"):
        assert np.array_equal(getattr(one, q), getattr(three, q))


def test_report_is_deterministic(affine200):
    a = s_axiom_residuals(affine200, seed=7).to_json()
    b = s_axiom_residuals(affine200, seed=7).to_json()
    assert a == b
