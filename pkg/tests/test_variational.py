import numpy as np
import pytest

from bsq.dynamics import NoisePath, evolve
from bsq.spectral import PhysParams, random_state, truncation, weighted_inner
from bsq.variational import (FrozenLinearization, LinearFlowRequest, LinearizedFlow, adjoint_K,
                             fd_tangent_check, linearization_matrix, operator_norm_estimate,
                             second_variation_J2, step_matrices, tangent_J)


@pytest.fixture(scope="module")
def traj():
    p = PhysParams(1.0, 0.7, 1.3)
    u0 = random_state(4, np.random.default_rng(2))
    return evolve(u0, p, 0.5, NoisePath.generate(3, 50, 0.01, p.d))


def test_duality(traj):
    rng = np.random.default_rng(0)
    p = traj.params
    for _ in range(5):
        xi, phi = random_state(4, rng), random_state(4, rng)
        jx = tangent_J(LinearFlowRequest(traj, 0.1, 0.4, xi))
        kp = adjoint_K(LinearFlowRequest(traj, 0.1, 0.4, phi))
        lhs, rhs = weighted_inner(jx, phi, p), weighted_inner(xi, kp, p)
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_tangent_matches_finite_differences(traj):
    xi = random_state(4, np.random.default_rng(5))
    a = fd_tangent_check(traj, xi, 1e-2)
    b = fd_tangent_check(traj, xi, 5e-3)
    assert a["rel"] < 1e-3
    assert 3.0 < a["abs"] / b["abs"] < 5.0


def test_frozen_adjoint_is_transpose():
    p = PhysParams(1.0, 0.5, 2.0)
    rng = np.random.default_rng(1)
    u, a, b = (random_state(3, rng).coeffs for _ in range(3))
    lin = FrozenLinearization(truncation(3), u, p)
    t = truncation(3)
    assert t.inner(lin.apply(a), b, p) == pytest.approx(t.inner(a, lin.apply_adjoint(b), p), rel=1e-12)


def test_dense_matrix_matches_operator():
    p = PhysParams(1.0, 0.5, 2.0)
    rng = np.random.default_rng(4)
    u, v = random_state(3, rng).coeffs, random_state(3, rng).coeffs
    L = linearization_matrix(3).matrix(u, p)
    lin = FrozenLinearization(truncation(3), u, p)
    np.testing.assert_allclose(L @ v.ravel(), lin.apply(v).ravel(), atol=1e-12)


def test_step_matrices_match_forward_steps(traj):
    flow = LinearizedFlow(traj)
    t, p = truncation(4), traj.params
    x = random_state(4, np.random.default_rng(8)).coeffs
    for i, S in step_matrices(traj, 3, 6, orthonormal=False):
        np.testing.assert_allclose(S @ x.ravel(), flow.forward_step(i, x).ravel(), atol=1e-12)
    sq = np.sqrt(t.weights(p) * np.ones((4, t.M))).ravel()
    for i, S in step_matrices(traj, 3, 4):
        np.testing.assert_allclose(S @ (sq * x.ravel()), sq * flow.forward_step(i, x).ravel(), atol=1e-12)


def test_second_variation_against_tangent_differences(traj):
    rng = np.random.default_rng(9)
    xi, eta = random_state(4, rng), random_state(4, rng)
    req = LinearFlowRequest(traj, 0.0, 0.5, xi)
    j2 = second_variation_J2(req, eta)
    h = 1e-4
    path = traj.path
    u0 = traj.state(0)
    plus = evolve(u0 + eta * h, traj.params, 0.5, path)
    minus = evolve(u0 - eta * h, traj.params, 0.5, path)
    fd = (tangent_J(LinearFlowRequest(plus, 0.0, 0.5, xi)) - tangent_J(LinearFlowRequest(minus, 0.0, 0.5, xi))) / (2 * h)
    err = np.abs((fd - j2).coeffs).max()
    assert err < 1e-6 * max(1.0, np.abs(j2.coeffs).max())


def test_linear_flow_norm_contracts_when_dissipative():
    p = PhysParams(5.0, 5.0, 1.0)
    traj = evolve(random_state(3, np.random.default_rng(0)), p, 1.0, NoisePath.zeros(100, 0.01, p.d))
    val = operator_norm_estimate(traj, 0.0, 1.0, np.random.default_rng(1))
    assert 0 < val < 1


def test_request_validation(traj):
    xi = random_state(3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        tangent_J(LinearFlowRequest(traj, 0.0, 0.2, xi))
    with pytest.raises(ValueError):
        LinearFlowRequest(traj, 0.3, 0.1, xi).nodes()
