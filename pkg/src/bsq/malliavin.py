"""Noise-to-state operators, the Malliavin matrix and cone-restricted probes.

Matrices are expressed in orthonormal coordinates: the flattened (4, M)
coefficient layout scaled by the square root of the weighted-pairing
weights.  In these coordinates adjoints are transposes and the Malliavin
matrix is an ordinary symmetric positive semidefinite matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .dynamics import (NoisePath, Trajectory, ensemble_increments, evolve, evolve_ensemble, noise_layout,
                       parallel_map, realization_rng)
from .spectral import TWO_PI_SQ, PhysParams, SpectralState, truncation
from .variational import LinearizedFlow, step_matrices


def _scales(n_trunc: int, p: PhysParams) -> np.ndarray:
    t = truncation(n_trunc)
    return np.sqrt(t.weights(p) * np.ones((4, t.M))).ravel()


def to_coords(u: SpectralState, p: PhysParams) -> np.ndarray:
    return u.coeffs.ravel() * _scales(u.n_trunc, p)


def from_coords(x: np.ndarray, n_trunc: int, p: PhysParams) -> SpectralState:
    t = truncation(n_trunc)
    return SpectralState((x / _scales(n_trunc, p)).reshape(4, t.M), n_trunc)


def _weights(i0: int, i1: int, dt: float) -> np.ndarray:
    w = np.full(i1 - i0 + 1, dt)
    if i1 > i0:
        w[0] = w[-1] = dt / 2
    else:
        w[:] = 0.0
    return w


@dataclass
class GramMatrix:
    entries: np.ndarray
    s: float
    t: float
    quad_steps: int
    n_trunc: int
    params: PhysParams

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def min_eig(self) -> float:
        return float(scipy.linalg.eigvalsh(self.entries, subset_by_index=[0, 0])[0])

    def trace(self) -> float:
        return float(np.trace(self.entries))

    def quadratic(self, phi: SpectralState) -> float:
        x = to_coords(phi, self.params)
        return float(x @ self.entries @ x)

    def low_mask(self, N: float) -> np.ndarray:
        t = truncation(self.n_trunc)
        return np.tile(t.low_mask(N), 4)


def _forced_coords(n_trunc: int, p: PhysParams) -> tuple[np.ndarray, np.ndarray]:
    """Flat indices of the forced directions and their coordinate amplitudes."""
    t = truncation(n_trunc)
    rows, idx, amp = noise_layout(t, p)
    flat = rows * t.M + idx
    return flat, amp * np.sqrt(TWO_PI_SQ)


def apply_Astar(traj: Trajectory, s: float, t: float, phi: SpectralState) -> np.ndarray:
    """r -> (alpha_k^l <sigma_k^l, K_{r,t} phi>) on the grid nodes of [s, t].

    Returns an array of shape (nodes, d) in the forced-direction order of
    the parameters.
    """
    i0, i1 = traj.node(s), traj.node(t)
    tr, p = truncation(traj.n_trunc), traj.params
    rows, idx, amp = noise_layout(tr, p)
    states = LinearizedFlow(traj).backward(i0, i1, phi.coeffs, keep=True)
    return np.array([amp * TWO_PI_SQ * b[rows, idx] for b in states])


def apply_Aop(traj: Trajectory, s: float, t: float, v: np.ndarray) -> SpectralState:
    """Integral over [s, t] of J_{r,t} sigma_theta v(r) dr (trapezoid on the grid).

    Computed as one linearized sweep with the noise directions as a source.
    """
    i0, i1 = traj.node(s), traj.node(t)
    v = np.asarray(v, dtype=float)
    if v.shape[0] != i1 - i0 + 1:
        raise ValueError("v must be sampled on every grid node of [s, t]")
    tr, p = truncation(traj.n_trunc), traj.params
    rows, idx, amp = noise_layout(tr, p)
    w = _weights(i0, i1, traj.dt)
    flow = LinearizedFlow(traj)

    def src(n):
        out = np.zeros((4, tr.M))
        out[rows, idx] = amp * v[n - i0] * w[n - i0]
        return out

    x = src(i0)
    for n in range(i0, i1):
        x = flow.forward_step(n, x) + src(n + 1)
    return SpectralState(x, traj.n_trunc)


def propagate_blocks(traj: Trajectory, i0: int, i1: int):
    """Backward accumulation over [i0, i1] in orthonormal coordinates.

    Returns (M, J): the Malliavin matrix of the interval and the tangent
    propagator J_{i0,i1}.
    """
    flat, famp = _forced_coords(traj.n_trunc, traj.params)
    w = _weights(i0, i1, traj.dt)
    dim = truncation(traj.n_trunc).dim
    Q = np.eye(dim)  # Q_r = J_{r,t}^T, columns K_{r,t} e_i
    rows = Q[flat] * famp[:, None]
    M = w[-1] * rows.T @ rows
    mats = list(step_matrices(traj, i0, i1))
    for i, S in reversed(mats):
        Q = S.T @ Q
        rows = Q[flat] * famp[:, None]
        M += w[i - i0] * rows.T @ rows
    return 0.5 * (M + M.T), Q.T


def assemble_M(traj: Trajectory, s: float, t: float) -> GramMatrix:
    i0, i1 = traj.node(s), traj.node(t)
    M, _ = propagate_blocks(traj, i0, i1)
    return GramMatrix(M, s, t, i1 - i0, traj.n_trunc, traj.params)


@dataclass
class ConeSpec:
    alpha: float
    N: float

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("cone parameter alpha must lie in (0, 1]")


def _min_eigpair(A):
    vals, vecs = scipy.linalg.eigh(A, subset_by_index=[0, 0])
    return vals[0], vecs[:, 0]


def _boundary_in_plane(M, mask, a, b, alpha):
    """Minimize x'Mx over unit x in span(a, b) with |P x|^2 = alpha."""
    b = b - (a @ b) * a
    nb = np.linalg.norm(b)
    if nb < 1e-12:
        return None
    b = b / nb
    pa, pb = a * mask, b * mask
    p11, p12, p22 = pa @ pa, pa @ pb, pb @ pb
    # (p11 - alpha) c^2 + 2 p12 c s + (p22 - alpha) s^2 = 0
    A, B, C = p22 - alpha, 2 * p12, p11 - alpha
    best = None
    if abs(A) < 1e-15:
        taus = [-C / B] if abs(B) > 1e-15 else []
        cand = [np.array([t, 1.0]) for t in []]
        cand = [np.array([1.0, tau]) for tau in taus]
        if abs(C) < 1e-15:
            cand.append(np.array([0.0, 1.0]))
    else:
        disc = B * B - 4 * A * C
        if disc < 0:
            return None
        r = np.sqrt(disc)
        cand = [np.array([1.0, (-B + r) / (2 * A)]), np.array([1.0, (-B - r) / (2 * A)])]
    for cs in cand:
        x = cs[0] * a + cs[1] * b
        x /= np.linalg.norm(x)
        val = x @ M @ x
        if best is None or val < best[0]:
            best = (val, x)
    return best


def cone_min(M: GramMatrix, cone: ConeSpec, tol: float = 1e-10) -> tuple[float, SpectralState]:
    """Minimum of <M phi, phi> over unit phi with |P_N phi|^2 >= alpha |phi|^2.

    KKT: either the lowest eigenvector of M already lies in the cone, or the
    constraint is active.  In the active case the value is the maximum over
    mu >= 0 of lambda_min(M - mu P) + mu alpha (concave in mu); its slope is
    alpha - |P phi_mu|^2, so the multiplier is found by bisection on the
    constraint residual.
    """
    A = np.asarray(M.entries, dtype=float)
    scale = max(np.abs(A).max(), 1e-300)
    if np.abs(A - A.T).max() > 1e-12 * scale:
        raise ValueError("matrix is not symmetric")
    mask = M.low_mask(cone.N).astype(float)
    alpha = cone.alpha
    n_low = int(mask.sum())
    if n_low == 0:
        raise ValueError("projection keeps no modes")

    def pack(val, x):
        return float(val), from_coords(x, M.n_trunc, M.params)

    lam, v = _min_eigpair(A)
    if (v * mask) @ (v * mask) >= alpha - tol or n_low == len(mask):
        return pack(lam, v)
    if alpha >= 1 - tol:
        sub = np.nonzero(mask)[0]
        lam, w = _min_eigpair(A[np.ix_(sub, sub)])
        x = np.zeros(len(mask))
        x[sub] = w
        return pack(lam, x)

    P = np.diag(mask)

    def probe(mu):
        val, x = _min_eigpair(A - mu * P)
        return val + mu * alpha, x, (x * mask) @ (x * mask)

    lo, hi = 0.0, max(scale, 1e-300)
    h_lo, x_lo, f_lo = probe(lo)
    h_hi, x_hi, f_hi = probe(hi)
    while f_hi < alpha and hi < 1e30 * max(scale, 1.0):
        lo, h_lo, x_lo, f_lo = hi, h_hi, x_hi, f_hi
        hi *= 4
        h_hi, x_hi, f_hi = probe(hi)
    for _ in range(200):
        if abs(f_lo - alpha) < tol or abs(f_hi - alpha) < tol or hi - lo <= 1e-15 * hi:
            break
        mid = 0.5 * (lo + hi)
        h_mid, x_mid, f_mid = probe(mid)
        if f_mid < alpha:
            lo, h_lo, x_lo, f_lo = mid, h_mid, x_mid, f_mid
        else:
            hi, h_hi, x_hi, f_hi = mid, h_mid, x_mid, f_mid
    value = max(h_lo, h_hi)
    if abs(f_lo - alpha) < tol:
        x = x_lo
    elif abs(f_hi - alpha) < tol:
        x = x_hi
    else:
        # eigenvalue crossing: the minimizer mixes the two bracketing vectors
        best = _boundary_in_plane(A, mask, x_lo, x_hi, alpha)
        x = best[1] if best is not None else x_hi
    return pack(value, x)


def regularized_control(traj: Trajectory, n: int, beta: float, rho: SpectralState) -> dict:
    """One stage of the regularized control on [n, n + 2].

    The control acts on [n, n + 1] and is zero on [n + 1, n + 2].  Returns the
    control samples, the propagated direction and the intermediate pieces.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    p = traj.params
    i0, i1, i2 = traj.node(n), traj.node(n + 1), traj.node(n + 2)
    Mmat, J1 = propagate_blocks(traj, i0, i1)
    x = to_coords(rho, p)
    jr = J1 @ x
    reg = Mmat + beta * np.eye(len(x))
    sol = scipy.linalg.solve(reg, jr, assume_a="pos")
    resid = beta * sol  # beta (M + beta)^-1 J rho
    v = apply_Astar(traj, n, n + 1, from_coords(sol, traj.n_trunc, p))
    flow = LinearizedFlow(traj)
    nxt = flow.forward(i1, i2, from_coords(resid, traj.n_trunc, p).coeffs)
    return {
        "control": v,
        "rho_next": SpectralState(nxt, traj.n_trunc),
        "residual": from_coords(resid, traj.n_trunc, p),
        "J_rho": from_coords(jr, traj.n_trunc, p),
        "malliavin": GramMatrix(Mmat, n, n + 1, i1 - i0, traj.n_trunc, p),
    }


def regularizer_norm(M: GramMatrix, beta: float, rng: np.random.Generator, iters: int = 50) -> float:
    """Power-iteration estimate of the norm of beta (M + beta I)^-1."""
    R = beta * np.linalg.inv(M.entries + beta * np.eye(M.dim))
    x = rng.standard_normal(M.dim)
    val = 0.0
    for _ in range(iters):
        y = R @ x
        val = np.linalg.norm(y) / np.linalg.norm(x)
        x = y / np.linalg.norm(y)
    return float(val)


def _decay_stages(args):
    """Control recursion on one stored trajectory; returns |rho_n| at n = 0, 2, ..., K."""
    p, beta, K, n_trunc, dt, seed, r, rho0, states = args
    traj = Trajectory(dt * np.arange(len(states)), states, p, n_trunc, seed)
    rho = rho0
    norms = [rho_norm(rho, p)]
    for n in range(0, K, 2):
        rho = regularized_control(traj, n, beta, rho)["rho_next"]
        norms.append(rho_norm(rho, p))
    return norms


def _decay_trajectories(p, K, n_trunc, dt, seed, reals, burn_in):
    """Post-burn-in trajectories on [0, K] for a block of realizations (batched integration)."""
    burn = int(round(burn_in / dt))
    steps = int(round(K / dt))
    inc = ensemble_increments(seed, reals, burn + steps, dt, p.d)
    u0 = np.zeros((4, truncation(n_trunc).M))
    if burn:
        u0 = evolve_ensemble(u0, p, n_trunc, dt, inc[:, :burn], observe=_last)[:, -1]
    return evolve_ensemble(u0, p, n_trunc, dt, inc[:, burn:])


def _last(a):
    return a.copy()


def rho_norm(u: SpectralState, p: PhysParams) -> float:
    from .spectral import weighted_norm
    return weighted_norm(u, p)


def bootstrap_ci(values: np.ndarray, stat, rng: np.random.Generator, n_boot: int = 2000,
                 level: float = 0.95) -> tuple[float, float]:
    values = np.asarray(values)
    n = len(values)
    reps = np.array([stat(values[rng.integers(0, n, n)]) for _ in range(n_boot)])
    lo, hi = np.quantile(reps, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


_DECAY_BLOCK = 50


def control_decay_experiment(p: PhysParams, beta: float, K: int, samples: int, *,
                             n_trunc: int = 4, dt: float = 1e-2, seed: int = 0,
                             rho0: SpectralState | None = None, burn_in: float = 1.0,
                             workers: int | None = None) -> dict:
    """Monte Carlo decay of E|rho_n|^8 along the regularized control recursion.

    The per-stage contraction is the geometric mean ratio
    (E|rho_K|^8 / E|rho_0|^8)^(2/K); its 95% interval comes from resampling
    realizations.
    """
    if K % 2:
        raise ValueError("horizon K must be even")
    if rho0 is None:
        rng = realization_rng(seed, 10**9)
        t = truncation(n_trunc)
        rho0 = SpectralState(rng.standard_normal((4, t.M)), n_trunc)
        rho0 = rho0 / rho_norm(rho0, p)
    rows = []
    for start in range(0, samples, _DECAY_BLOCK):
        reals = range(start, min(samples, start + _DECAY_BLOCK))
        states = _decay_trajectories(p, K, n_trunc, dt, seed, reals, burn_in)
        args = [(p, beta, K, n_trunc, dt, seed, r, rho0, states[i]) for i, r in enumerate(reals)]
        rows.extend(parallel_map(_decay_stages, args, workers))
    norms = np.array(rows)
    moments = norms**8
    stages = K // 2

    def contraction(rows):
        m = rows.mean(axis=0)
        if m[0] == 0:
            return 0.0
        return float((m[-1] / m[0]) ** (1.0 / stages))

    factor = contraction(moments)
    lo, hi = bootstrap_ci(moments, contraction, realization_rng(seed, 10**9 + 1))
    return {
        "stages": list(range(0, K + 1, 2)),
        "moment8": moments.mean(axis=0).tolist(),
        "contraction": factor,
        "ci95": (lo, hi),
        "norms": norms,
    }


def ito_isometry_check(v_fn, samples: int, *, T: float = 1.0, steps: int = 100, d: int = 4,
                       seed: int = 0, chunk: int = 10000) -> dict:
    """Compare Var(sum v . dW) with E int |v|^2 dt for an adapted integrand.

    ``v_fn(W_left, t_left)`` receives the Brownian path at the left node of
    each step (shape (chunk, d)) and returns the integrand there.  The
    left-point sum is a martingale transform, so the paired difference
    I^2 - int |v|^2 has mean zero; the z-score is measured in Monte Carlo
    standard errors.
    """
    dt = T / steps
    rng = realization_rng(seed, 0)
    ints, quads = [], []
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        w = np.zeros((m, d))
        acc = np.zeros(m)
        q = np.zeros(m)
        for n in range(steps):
            v = v_fn(w, n * dt)
            dW = rng.standard_normal((m, d)) * np.sqrt(dt)
            acc += np.sum(v * dW, axis=1)
            q += np.sum(v * v, axis=1) * dt
            w = w + dW
        ints.append(acc)
        quads.append(q)
        done += m
    ints, quads = np.concatenate(ints), np.concatenate(quads)
    diff = ints**2 - quads
    se = diff.std(ddof=1) / np.sqrt(samples)
    var = ints.var(ddof=1)
    return {
        "variance": float(var),
        "expected": float(quads.mean()),
        "mean_integral": float(ints.mean()),
        "z": float(diff.mean() / se) if se > 0 else 0.0,
        "se": float(se),
        "second_moment_se": float((ints**2).std(ddof=1) / np.sqrt(samples)),
    }


def hypoellipticity_probe(p: PhysParams, realizations: int, *, n_trunc: int = 6, dt: float = 1e-2,
                          seed: int = 0, alpha: float = 0.5, N: float = 1, burn_in: float = 2.0,
                          compare: PhysParams | None = None, workers: int | None = None) -> list[dict]:
    """cone_min of M_{0,1} per realization, optionally also under ``compare`` params.

    Each realization burns in under ``p`` from rest, then both parameter sets
    integrate the same unit interval with the same noise increments.
    """
    args = [(p, compare, n_trunc, dt, seed, r, alpha, N, burn_in) for r in range(realizations)]
    return parallel_map(_probe_realization, args, workers)


def _probe_realization(args):
    p, compare, n_trunc, dt, seed, r, alpha, N, burn_in = args
    burn = int(round(burn_in / dt))
    unit = int(round(1.0 / dt))
    path = NoisePath.generate(seed, burn + unit, dt, p.d, realization=r)
    u0 = SpectralState.zeros(n_trunc)
    if burn:
        u0 = evolve(u0, p, burn * dt, NoisePath(dt, path.increments[:burn], seed, r)).final()
    tail = NoisePath(dt, path.increments[burn:], seed, r)
    row = {"realization": r, "s": 0.0, "t": 1.0, "alpha": alpha, "N": N}
    for tag, params in (("", p), ("compare_", compare)):
        if params is None:
            continue
        traj = evolve(u0, params, 1.0, tail)
        M = assemble_M(traj, 0.0, 1.0)
        val, _ = cone_min(M, ConeSpec(alpha, N))
        row[tag + "cone_min"] = val
        row[tag + "min_eig"] = M.min_eig()
        row[tag + "trace"] = M.trace()
    return row
