from fractions import Fraction

import numpy as np
import pytest

from bsq.brackets import (AXIS_RECIPES, approximate_basis, assemble_recipe, bracket_fd, bracket_Z_sigma,
                          bracket_Z_Y, canonical_modes, cascade_probe, chain_field, combination_state,
                          constant_field, drift_field, field_Y, generate_sigma, generate_span, junk,
                          junk_tail, product_psi_psi, product_psi_sigma, psi_with_error, quad_form_Q,
                          require_headroom, sigma_coeffs, tail_budget, target_set, verification_matrix)
from bsq.dynamics import NoisePath, evolve
from bsq.spectral import (E1, E2, BasisElement, PhysParams, SpectralState, TruncationError, advect_B,
                          basis_vector, mode, psi, random_state, sigma, weighted_norm)


@pytest.fixture(scope="module")
def p():
    return PhysParams(1.0, 0.7, 1.3)


@pytest.fixture(scope="module")
def U():
    return random_state(12, np.random.default_rng(1), band=2)


def test_closed_forms_match_finite_differences(p, U):
    rows = verification_matrix(p, 1.0, [U])
    assert {r["field"] for r in rows} == {"Y", "Z", "psiJ", "Zsigma", "ZY"}
    assert max(r["rel_err"] for r in rows) < 1e-9
    assert max(r.get("u_spread", 0.0) for r in rows) == 0.0  # one state: spread is trivially zero


def test_first_bracket_is_field_Y(p, U):
    s = basis_vector(sigma(mode(1, 1), 1), U.n_trunc)
    fd = bracket_fd(drift_field(p), constant_field(s), U)
    assert np.abs((fd - field_Y(mode(1, 1), 1, U, p)).coeffs).max() < 1e-9


@pytest.mark.parametrize("j", [mode(1, 0), mode(0, 2), mode(2, -1), mode(1, 2)])
@pytest.mark.parametrize("k", [mode(1, 1), mode(0, 1), mode(2, 1)])
def test_product_rule_identities(j, k):
    n = 8
    for m in (0, 1):
        for mp in (0, 1):
            pj = basis_vector(psi(j, m), n)
            for kind, fn in (("sigma", product_psi_sigma), ("psi", product_psi_psi)):
                other = basis_vector(BasisElement(kind, k, mp), n)
                diff = advect_B(pj, other) - combination_state(fn(j, m, k, mp), n)
                assert np.abs(diff.coeffs).max() < 1e-12


def test_z_sigma_is_state_independent(p):
    n = 10
    j, k = mode(1, 1), mode(1, -1)
    Zf = chain_field("Z", p, n, j, 0)
    s = constant_field(basis_vector(sigma(k, 1), n))
    rng = np.random.default_rng(0)
    vals = [bracket_fd(Zf, s, random_state(n, rng, band=2)) for _ in range(3)]
    closed = combination_state(bracket_Z_sigma(j, 0, k, 1, p.g), n)
    for v in vals:
        assert np.abs((v - closed).coeffs).max() < 1e-9


def test_sigma_recipes_have_exact_prefactors(p):
    j, k = mode(1, 1), E2
    out = generate_sigma(j, k)
    a, b = sigma_coeffs(j, k)
    assert (a, b) == (Fraction(1, 2), Fraction(1, 2))
    for rec in out["recipes"]:
        state = assemble_recipe(j, k, rec, p, 6)
        assert isinstance(rec.prefactor, Fraction) and rec.prefactor != 0
        expected = basis_vector(rec.target, 6) * (p.g * float(rec.prefactor))
        assert np.abs((state - expected).coeffs).max() < 1e-12


def test_sigma_recipe_vanishing_prefactor_is_unreachable():
    # j = (1,0), k = (1,0): j_perp . k = 0
    out = generate_sigma(E1, E1)
    assert not out["recipes"] and len(out["unreachable"]) == 4


def test_z_y_remainder_is_affine_temperature_only(p, U):
    j, k = mode(1, 1), E2
    r0 = bracket_Z_Y(j, 0, k, 1, U * 0, p)["remainder"]
    r1 = bracket_Z_Y(j, 0, k, 1, U, p)["remainder"]
    r2 = bracket_Z_Y(j, 0, k, 1, U * 2, p)["remainder"]
    assert np.abs(r1.coeffs[:2]).max() < 1e-12
    assert np.abs((r2 - r1 * 2 + r0).coeffs).max() < 1e-10


@pytest.mark.parametrize("j", [mode(0, 1), mode(0, 2), mode(1, 0), mode(2, -1)])
@pytest.mark.parametrize("m", [0, 1])
def test_generated_psi_has_unit_coefficient_and_clean_error(p, U, j, m):
    full = psi_with_error(j, m, U, p)
    assert full.coefficient(psi(j, m)) == pytest.approx(1.0, abs=1e-12)
    J = junk(j, m, U, p)
    assert np.abs(J.coeffs[:2]).max() < 1e-12
    J0, J2 = junk(j, m, U * 0, p), junk(j, m, U * 2, p)
    assert np.abs((J2 - J * 2 + J0).coeffs).max() < 1e-10


def test_axis_recipe_table():
    assert set(AXIS_RECIPES) == {0, 1}
    assert all(len(v) == 2 for v in AXIS_RECIPES.values())


def test_junk_tail_vanishes_beyond_products(p):
    U = random_state(16, np.random.default_rng(2), band=3)
    _, nrm = junk_tail(mode(1, 0), 0, U, 10.0, p)
    _, low = junk_tail(mode(1, 0), 0, U, 2.0, p)
    assert low > 0
    assert nrm < 1e-13 * low


def test_headroom_guard():
    U = random_state(6, np.random.default_rng(0), band=3)
    with pytest.raises(TruncationError):
        require_headroom(U, 2, 1)
    require_headroom(random_state(6, np.random.default_rng(0), band=2), 2, 2)


def test_target_set_small():
    assert target_set(1) == {mode(1, 1), mode(1, -1)}
    assert all(j.is_canonical() for j in target_set(4))


def test_span_covers_and_negative_control():
    led = generate_span([E1, E2], 3)
    assert led.covered and led.depth >= 1
    assert "covered True" in led.report()
    bad = generate_span([mode(2, 0), mode(0, 2)], 1)
    assert not bad.covered
    assert mode(1, 1) in bad.uncovered


def test_canonical_modes():
    assert canonical_modes(1) == [mode(0, 1), mode(1, 0)]
    assert len(canonical_modes(3)) == 14


def test_quadratic_form_lower_bound(p):
    U = random_state(20, np.random.default_rng(5), band=4, scale=0.3)
    basis = approximate_basis(1.0, 6.0, U, p)
    budget = tail_budget(1.0, 6.0, U, p)
    assert budget < 0.25
    rng = np.random.default_rng(7)
    low = [b for _, b in basis]
    for _ in range(5):
        phi = SpectralState.zeros(20)
        for b in low:
            phi = phi + b * rng.standard_normal()
        phi = phi / weighted_norm(phi, p)
        assert quad_form_Q(1.0, 6.0, U, phi, p, basis) >= 0.5 - budget - 1e-9


def test_cascade_derivative_matches_prediction(p):
    n = 8
    u0 = random_state(n, np.random.default_rng(3), band=2, scale=0.3)
    traj = evolve(u0, p, 0.2, NoisePath.generate(1, 400, 5e-4, p.d))
    phi = random_state(n, np.random.default_rng(4))
    chain = [chain_field("sigma", p, n, E1, 0), chain_field("Y", p, n, E1, 0)]
    rep = cascade_probe(traj, phi, chain)
    for s in rep["series"].values():
        d, q = s["derivative"][1:-1], s["predicted"][1:-1]
        assert np.abs(d - q).max() < 0.05 * np.abs(q).max()
