"""Linearized flows along a stored trajectory.

The tangent flow propagates perturbations of the initial condition forward,
the second variation collects the quadratic response and the adjoint flow
runs backward in the weighted pairing.  All three freeze the coefficients of
each step at the stored snapshot of the step's earlier node, and the adjoint
step is the exact transpose of the tangent step in the weighted pairing, so
the duality between them holds to rounding error at any dt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import Stepper, Trajectory, evolve
from .spectral import PhysParams, SpectralState, Truncation, truncation


@dataclass
class LinearFlowRequest:
    trajectory: Trajectory
    s: float
    t: float
    direction: SpectralState

    def nodes(self) -> tuple[int, int]:
        i = self.trajectory.node(self.s)
        k = self.trajectory.node(self.t)
        if i > k:
            raise ValueError("need s <= t")
        return i, k


class FrozenLinearization:
    """The operator rho -> -grad B(U) rho + G rho at a fixed state U, and its adjoint.

    grad B(U) rho = B(U, rho) + B(rho, U).  In the weighted pairing
    zeta <omega, omega'> + <theta, theta'> its adjoint is

        omega: -u.grad(phi_w) + (1/zeta) K*(zeta phi_w grad(omega_U) + phi_t grad(theta_U))
        theta: -u.grad(phi_t)

    where u is the velocity of U and K* is the L2 adjoint of the
    vorticity-to-velocity map.
    """

    def __init__(self, t: Truncation, a: np.ndarray, p: PhysParams, nonlinear: bool = True):
        self.t, self.p, self.nonlinear = t, p, nonlinear
        if not nonlinear:
            return
        u1c, u1s, u2c, u2s = t.velocity(a)
        gw = t.gradient_coeffs(a[0], a[1])
        gt = t.gradient_coeffs(a[2], a[3])
        cs = np.stack([u1c, u2c, gw[0], gw[2], gt[0], gt[2]])
        ss = np.stack([u1s, u2s, gw[1], gw[3], gt[1], gt[3]])
        self.grid = t.to_grid(cs, ss)  # u1, u2, wx, wy, tx, ty

    def _grad_grids(self, b):
        t = self.t
        gw = t.gradient_coeffs(b[..., 0, :], b[..., 1, :])
        gt = t.gradient_coeffs(b[..., 2, :], b[..., 3, :])
        return gw, gt

    def grad_B(self, b: np.ndarray) -> np.ndarray:
        t, G = self.t, self.grid
        gw, gt = self._grad_grids(b)
        v1c, v1s, v2c, v2s = t.velocity(b)
        cs = np.stack([gw[0], gw[2], gt[0], gt[2], v1c, v2c], axis=-2)
        ss = np.stack([gw[1], gw[3], gt[1], gt[3], v1s, v2s], axis=-2)
        g = t.to_grid(cs, ss)
        u1, u2, wx, wy, tx, ty = G
        om = u1 * g[..., 0, :, :] + u2 * g[..., 1, :, :] + g[..., 4, :, :] * wx + g[..., 5, :, :] * wy
        th = u1 * g[..., 2, :, :] + u2 * g[..., 3, :, :] + g[..., 4, :, :] * tx + g[..., 5, :, :] * ty
        c, s = t.from_grid(np.stack([om, th], axis=-3))
        out = np.empty(np.shape(b))
        out[..., 0, :], out[..., 1, :] = c[..., 0, :], s[..., 0, :]
        out[..., 2, :], out[..., 3, :] = c[..., 1, :], s[..., 1, :]
        return out

    def grad_B_adjoint(self, b: np.ndarray) -> np.ndarray:
        t, G, zeta = self.t, self.grid, self.p.zeta
        gw, gt = self._grad_grids(b)
        cs = np.stack([gw[0], gw[2], gt[0], gt[2], b[..., 0, :], b[..., 2, :]], axis=-2)
        ss = np.stack([gw[1], gw[3], gt[1], gt[3], b[..., 1, :], b[..., 3, :]], axis=-2)
        g = t.to_grid(cs, ss)
        u1, u2, wx, wy, tx, ty = G
        pw, pt = g[..., 4, :, :], g[..., 5, :, :]
        adv_w = u1 * g[..., 0, :, :] + u2 * g[..., 1, :, :]
        adv_t = u1 * g[..., 2, :, :] + u2 * g[..., 3, :, :]
        w1 = zeta * pw * wx + pt * tx
        w2 = zeta * pw * wy + pt * ty
        c, s = t.from_grid(np.stack([adv_w, adv_t, w1, w2], axis=-3))
        # K* w = -(iq1 w1 + iq2 w2) in the real cos/sin form
        k1c, k1s = t.mul_iq(c[..., 2, :], s[..., 2, :], t.q1)
        k2c, k2s = t.mul_iq(c[..., 3, :], s[..., 3, :], t.q2)
        out = np.empty(np.shape(b))
        out[..., 0, :] = -c[..., 0, :] - (k1c + k2c) / zeta
        out[..., 1, :] = -s[..., 0, :] - (k1s + k2s) / zeta
        out[..., 2, :], out[..., 3, :] = -c[..., 1, :], -s[..., 1, :]
        return out

    def apply(self, b: np.ndarray) -> np.ndarray:
        out = self.t.buoyancy(b, self.p)
        if self.nonlinear:
            out -= self.grad_B(b)
        return out

    def apply_adjoint(self, b: np.ndarray) -> np.ndarray:
        out = self.t.buoyancy_adjoint(b, self.p)
        if self.nonlinear:
            out -= self.grad_B_adjoint(b)
        return out


class LinearizedFlow:
    """Step-by-step tangent and adjoint propagation along one trajectory."""

    def __init__(self, traj: Trajectory):
        self.traj = traj
        self.t = truncation(traj.n_trunc)
        self.nonlinear = getattr(traj, "nonlinear", True)
        self.stepper = Stepper(traj.n_trunc, traj.params, traj.dt or 1.0, self.nonlinear)
        self._cache: dict[int, FrozenLinearization] = {}

    def frozen(self, i: int) -> FrozenLinearization:
        lin = self._cache.get(i)
        if lin is None:
            lin = FrozenLinearization(self.t, self.traj.states[i], self.traj.params, self.nonlinear)
            if len(self._cache) < 4096:
                self._cache[i] = lin
        return lin

    def forward_step(self, i: int, b: np.ndarray, source: np.ndarray | None = None) -> np.ndarray:
        dt = self.traj.dt
        inc = self.frozen(i).apply(b)
        if source is not None:
            inc = inc + source
        return self.stepper.expo * (b + dt * inc)

    def adjoint_step(self, i: int, b: np.ndarray) -> np.ndarray:
        dt = self.traj.dt
        c = self.stepper.expo * b
        return c + dt * self.frozen(i).apply_adjoint(c)

    def forward(self, i0: int, i1: int, b: np.ndarray, keep: bool = False):
        out = [b] if keep else None
        for i in range(i0, i1):
            b = self.forward_step(i, b)
            if keep:
                out.append(b)
        return out if keep else b

    def backward(self, i0: int, i1: int, b: np.ndarray, keep: bool = False):
        """Adjoint flow from node i1 back to node i0; with keep, list indexed i0..i1."""
        out = [b] if keep else None
        for i in range(i1 - 1, i0 - 1, -1):
            b = self.adjoint_step(i, b)
            if keep:
                out.append(b)
        if keep:
            out.reverse()
            return out
        return b


def _flow(req: LinearFlowRequest) -> LinearizedFlow:
    if req.direction.n_trunc != req.trajectory.n_trunc:
        raise ValueError("direction and trajectory truncations differ")
    return LinearizedFlow(req.trajectory)


def tangent_J(req: LinearFlowRequest) -> SpectralState:
    i, k = req.nodes()
    out = _flow(req).forward(i, k, req.direction.coeffs)
    return SpectralState(out, req.trajectory.n_trunc)


def adjoint_K(req: LinearFlowRequest) -> SpectralState:
    """Backward adjoint flow: the direction is the terminal value at time t."""
    i, k = req.nodes()
    out = _flow(req).backward(i, k, req.direction.coeffs)
    return SpectralState(out, req.trajectory.n_trunc)


def second_variation_J2(req: LinearFlowRequest, direction2: SpectralState) -> SpectralState:
    """Second derivative of the flow in directions (direction, direction2).

    Forced by grad B(J xi) J xi' = B(J xi, J xi') + B(J xi', J xi) and started
    from zero.
    """
    i, k = req.nodes()
    flow = _flow(req)
    t = flow.t
    r1, r2 = req.direction.coeffs, direction2.coeffs
    w = np.zeros_like(r1)
    for n in range(i, k):
        src = None
        if flow.nonlinear:
            src = -(t.advect(r1, r2) + t.advect(r2, r1))
        w = flow.forward_step(n, w, src)
        r1 = flow.forward_step(n, r1)
        r2 = flow.forward_step(n, r2)
    return SpectralState(w, req.trajectory.n_trunc)


def fd_tangent_check(traj: Trajectory, xi: SpectralState, h: float, t: float | None = None) -> dict:
    """Compare a central difference of the flow map with the tangent flow.

    The perturbed runs reuse the trajectory's noise path.  Returns absolute
    and relative discrepancies; the relative one is 0 when both vanish.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    if traj.path is None:
        raise ValueError("trajectory has no stored noise path")
    t = traj.horizon if t is None else t
    u0 = traj.state(0)
    nl = getattr(traj, "nonlinear", True)
    up = evolve(u0 + h * xi, traj.params, t, traj.path, nonlinear=nl).final()
    um = evolve(u0 - h * xi, traj.params, t, traj.path, nonlinear=nl).final()
    fd = (up - um) / (2 * h)
    jx = tangent_J(LinearFlowRequest(traj, 0.0, t, xi))
    p = traj.params
    from .spectral import weighted_norm
    err = weighted_norm(fd - jx, p)
    ref = weighted_norm(jx, p)
    rel = 0.0 if err == 0 else (err / ref if ref > 0 else float("inf"))
    return {"h": h, "abs": err, "rel": rel, "norm_J": ref}


def operator_norm_estimate(traj: Trajectory, s: float, t: float, rng: np.random.Generator,
                           iters: int = 30, project_high: float | None = None) -> float:
    """Power iteration for the weighted operator norm of J_{s,t} (optionally of J Q_N)."""
    flow = LinearizedFlow(traj)
    i, k = traj.node(s), traj.node(t)
    tr, p = flow.t, traj.params
    mask = None
    if project_high is not None:
        mask = ~tr.low_mask(project_high)
    x = rng.standard_normal((4, tr.M))
    if mask is not None:
        x = x * mask
    x /= np.sqrt(tr.inner(x, x, p))
    val = 0.0
    for _ in range(iters):
        y = flow.forward(i, k, x)
        z = flow.backward(i, k, y)
        if mask is not None:
            z = z * mask
        val = np.sqrt(tr.inner(z, x, p))
        nz = np.sqrt(tr.inner(z, z, p))
        if nz == 0:
            return 0.0
        x = z / nz
    return float(val)


class LinearizationMatrix:
    """Dense real matrices of rho -> -grad B(U) rho + G rho.

    Built from the Fourier convolution form of the transport term.  For an
    output mode k and input mode q of the full lattice,

        B(U, V)^_k = -sum_q (k_perp . q) / |k - q|^2  Omega_{k-q} V^_q
        B(V, U)^_k =  sum_q (k_perp . q) / |q|^2     Omega^V_q U^_{k-q}

    with Omega the complex vorticity coefficients of U.  Coupling indices
    are precomputed once per truncation, so each matrix costs a gather.
    """

    def __init__(self, n_trunc: int):
        t = self.t = truncation(n_trunc)
        n = t.n
        full = np.concatenate([t.modes, -t.modes])
        out = t.modes
        diff = out[:, None, :] - full[None, :, :]
        self.pad = 4 * n + 1
        self.D = ((diff[..., 0] + 2 * n) * self.pad + diff[..., 1] + 2 * n)
        kperp_q = -out[:, None, 1] * full[None, :, 0] + out[:, None, 0] * full[None, :, 1]
        d2 = (diff**2).sum(-1).astype(float)
        with np.errstate(divide="ignore", invalid="ignore"):
            self.C1 = np.where(d2 > 0, -kperp_q / d2, 0.0)
        q2 = (full**2).sum(-1).astype(float)
        self.C2 = kperp_q / q2[None, :]
        self._pos = (t.modes[:, 0] + 2 * n) * self.pad + t.modes[:, 1] + 2 * n
        self._neg = (-t.modes[:, 0] + 2 * n) * self.pad - t.modes[:, 1] + 2 * n

    def _padded(self, c, s):
        z = np.zeros(self.pad * self.pad, dtype=complex)
        vals = 0.5 * (c - 1j * s)
        z[self._pos] = vals
        z[self._neg] = np.conj(vals)
        return z

    def _real_blocks(self, X):
        M = self.t.M
        xpp, xpn = X[:, :M], X[:, M:]
        sm, df = xpp + xpn, xpp - xpn
        return np.block([[sm.real, df.imag], [-sm.imag, df.real]])

    def grad_B(self, a: np.ndarray) -> np.ndarray:
        """(4M, 4M) matrix of rho -> grad B(U) rho in the flattened (4, M) layout."""
        M = self.t.M
        om = self._padded(a[0], a[1])[self.D]
        th = self._padded(a[2], a[3])[self.D]
        same = self.C1 * om
        out = np.zeros((4 * M, 4 * M))
        out[: 2 * M, : 2 * M] = self._real_blocks(same + self.C2 * om)
        out[2 * M:, 2 * M:] = self._real_blocks(same)
        out[2 * M:, : 2 * M] = self._real_blocks(self.C2 * th)
        return out

    def buoyancy(self, p: PhysParams) -> np.ndarray:
        t, M = self.t, self.t.M
        out = np.zeros((4 * M, 4 * M))
        q = p.g * t.k1
        idx = np.arange(M)
        out[idx, 3 * M + idx] = q
        out[M + idx, 2 * M + idx] = -q
        return out

    def matrix(self, a: np.ndarray, p: PhysParams, nonlinear: bool = True) -> np.ndarray:
        L = self.buoyancy(p)
        if nonlinear:
            L -= self.grad_B(a)
        return L


_LIN_CACHE: dict[int, LinearizationMatrix] = {}


def linearization_matrix(n_trunc: int) -> LinearizationMatrix:
    lm = _LIN_CACHE.get(n_trunc)
    if lm is None:
        lm = _LIN_CACHE[n_trunc] = LinearizationMatrix(n_trunc)
    return lm


def step_matrices(traj: Trajectory, i0: int, i1: int, orthonormal: bool = True):
    """Yield (i, S_i) for the tangent step matrices on nodes i0..i1-1.

    With ``orthonormal`` the matrices act on coordinates in which the weighted
    pairing is the Euclidean dot product, so adjoints are transposes.
    """
    t = truncation(traj.n_trunc)
    lm = linearization_matrix(traj.n_trunc)
    p, dt = traj.params, traj.dt
    nl = getattr(traj, "nonlinear", True)
    expo = Stepper(traj.n_trunc, p, dt, nl).expo.ravel()
    sq = np.sqrt(t.weights(p) * np.ones((4, t.M))).ravel()
    eye = np.eye(t.dim)
    for i in range(i0, i1):
        S = expo[:, None] * (eye + dt * lm.matrix(traj.states[i], p, nl))
        if orthonormal:
            S = sq[:, None] * S / sq[None, :]
        yield i, S
