"""Time integration of the stochastic system and Wiener path management.

The scheme is exponential (integrating-factor) Euler: the dissipation is
integrated exactly by its semigroup, advection and buoyancy are explicit, and
the additive noise on each forced temperature mode uses the exact variance of
the Ornstein-Uhlenbeck convolution over one step.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .spectral import PhysParams, SpectralState, Truncation, truncation

BLOWUP_THRESHOLD = 1e12


class BlowUpError(RuntimeError):
    def __init__(self, step: int, max_abs: float):
        super().__init__(f"integration blew up at step {step} (max |coefficient| = {max_abs:.3e})")
        self.step = step
        self.max_abs = max_abs


def realization_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Independent stream for realization ``index`` of master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


@dataclass
class NoisePath:
    """Wiener increments, one row per step, one column per forced direction."""

    dt: float
    increments: np.ndarray
    seed: int = 0
    realization: int = 0

    def __post_init__(self):
        self.increments = np.asarray(self.increments, dtype=float)
        if self.increments.ndim != 2:
            raise ValueError("increments must be (steps, d)")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @classmethod
    def generate(cls, seed: int, steps: int, dt: float, d: int, realization: int = 0):
        rng = realization_rng(seed, realization)
        inc = rng.standard_normal((steps, d)) * np.sqrt(dt)
        return cls(dt, inc, seed, realization)

    @classmethod
    def zeros(cls, steps: int, dt: float, d: int):
        return cls(dt, np.zeros((steps, d)))

    @property
    def steps(self) -> int:
        return self.increments.shape[0]

    @property
    def d(self) -> int:
        return self.increments.shape[1]

    def cumulative(self) -> np.ndarray:
        """W at the grid nodes, shape (steps + 1, d), W(0) = 0."""
        w = np.zeros((self.steps + 1, self.d))
        np.cumsum(self.increments, axis=0, out=w[1:])
        return w

    def coarsen(self, factor: int) -> "NoisePath":
        """Sum consecutive blocks of increments (same Brownian path, larger dt)."""
        steps = self.steps // factor
        inc = self.increments[: steps * factor].reshape(steps, factor, self.d).sum(axis=1)
        return NoisePath(self.dt * factor, inc, self.seed, self.realization)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (steps + 1, 4, M)
    params: PhysParams
    n_trunc: int
    noise_seed: int = 0
    path: NoisePath | None = field(default=None, repr=False)
    nonlinear: bool = True

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def state(self, i: int) -> SpectralState:
        return SpectralState(self.states[i].copy(), self.n_trunc)

    def final(self) -> SpectralState:
        return self.state(-1)

    def node(self, t: float) -> int:
        """Grid index of time t; raises if t is not on the step grid."""
        if self.steps == 0:
            if abs(t - self.times[0]) > 1e-12:
                raise ValueError(f"time {t} is not on the step grid")
            return 0
        x = (t - self.times[0]) / self.dt
        i = int(round(x))
        if abs(x - i) > 1e-6 or i < 0 or i > self.steps:
            raise ValueError(f"time {t} is not on the step grid")
        return i


def noise_layout(t: Truncation, p: PhysParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(rows, mode indices, amplitudes) for each forced direction, in p.forced order."""
    rows, idx, amp = [], [], []
    for (k, m) in p.forced:
        rows.append(2 + m)
        idx.append(t.index(k))
        amp.append(p.alphas[(k, m)])
    return np.array(rows, dtype=int), np.array(idx, dtype=int), np.array(amp)


def noise_state(t: Truncation, p: PhysParams, w: np.ndarray) -> np.ndarray:
    """Array for sigma_theta w (w has leading batch dims, last axis d)."""
    rows, idx, amp = noise_layout(t, p)
    out = np.zeros(np.shape(w)[:-1] + (4, t.M))
    out[..., rows, idx] = np.asarray(w) * amp
    return out


class Stepper:
    """Precomputed multipliers for exponential Euler at fixed (params, dt)."""

    def __init__(self, n_trunc: int, p: PhysParams, dt: float, nonlinear: bool = True):
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.t = t = truncation(n_trunc)
        self.p, self.dt, self.nonlinear = p, dt, nonlinear
        lam = np.empty((4, t.M))
        lam[0:2] = p.nu1 * t.k_sq
        lam[2:4] = p.nu2 * t.k_sq
        self.lam = lam
        self.expo = np.exp(-lam * dt)
        self.rows, self.idx, amp = noise_layout(t, p)
        rate = lam[self.rows, self.idx]
        # exact OU variance of the convolution over one step, per unit dW
        self.noise_gain = amp * np.sqrt(-np.expm1(-2 * rate * dt) / (2 * rate * dt))

    def explicit(self, a: np.ndarray) -> np.ndarray:
        out = self.t.buoyancy(a, self.p)
        if self.nonlinear:
            out -= self.t.advect(a, a)
        return out

    def __call__(self, a: np.ndarray, dW: np.ndarray) -> np.ndarray:
        new = self.expo * (a + self.dt * self.explicit(a))
        new[..., self.rows, self.idx] += self.noise_gain * dW
        return new


def _check_blowup(a: np.ndarray, step: int):
    m = np.max(np.abs(a))
    if not np.isfinite(m) or m > BLOWUP_THRESHOLD:
        raise BlowUpError(step, float(m))


def step(u: SpectralState, p: PhysParams, dt: float, dW, nonlinear: bool = True) -> SpectralState:
    """One exponential-Euler step; raises BlowUpError on overflow."""
    new = Stepper(u.n_trunc, p, dt, nonlinear)(u.coeffs, np.asarray(dW, dtype=float))
    _check_blowup(new, 1)
    return SpectralState(new, u.n_trunc)


def _steps_for(T: float, path: NoisePath) -> int:
    if T < 0:
        raise ValueError("T must be nonnegative")
    n = int(round(T / path.dt))
    if abs(n * path.dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T={T} is not a multiple of dt={path.dt}")
    if n > path.steps:
        raise ValueError(f"noise path covers {path.steps} steps, {n} needed")
    return n


def evolve(u0: SpectralState, p: PhysParams, T: float, path: NoisePath,
           nonlinear: bool = True) -> Trajectory:
    """Integrate from u0 over [0, T] and keep every step."""
    n = _steps_for(T, path)
    if path.d != p.d:
        raise ValueError(f"noise path has {path.d} directions, params force {p.d}")
    stepper = Stepper(u0.n_trunc, p, path.dt, nonlinear)
    states = np.empty((n + 1,) + u0.coeffs.shape)
    states[0] = u0.coeffs
    a = u0.coeffs
    for i in range(n):
        a = stepper(a, path.increments[i])
        _check_blowup(a, i + 1)
        states[i + 1] = a
    return Trajectory(path.dt * np.arange(n + 1), states, p, u0.n_trunc, path.seed, path, nonlinear)


def evolve_shifted(u0: SpectralState, p: PhysParams, T: float, path: NoisePath,
                   nonlinear: bool = True) -> Trajectory:
    """Integrate the noise-shifted variable u - sigma_theta W.

    The shifted variable solves a random ODE with drift F(ubar + sigma W);
    the dissipation acting on ubar is again handled by its semigroup.
    """
    n = _steps_for(T, path)
    stepper = Stepper(u0.n_trunc, p, path.dt, nonlinear)
    t, dt = stepper.t, path.dt
    w = noise_state(t, p, path.cumulative()[: n + 1])
    states = np.empty((n + 1,) + u0.coeffs.shape)
    states[0] = u0.coeffs
    a = u0.coeffs
    for i in range(n):
        full = a + w[i]
        forcing = -t.dissipation(w[i], p) + stepper.explicit(full)
        a = stepper.expo * (a + dt * forcing)
        _check_blowup(a, i + 1)
        states[i + 1] = a
    return Trajectory(dt * np.arange(n + 1), states, p, u0.n_trunc, path.seed, path, nonlinear)


def ensemble_increments(seed: int, realizations, steps: int, dt: float, d: int) -> np.ndarray:
    """(R, steps, d) increments; row r equals NoisePath.generate(seed, ..., realization=r)."""
    return np.stack([NoisePath.generate(seed, steps, dt, d, realization=r).increments
                     for r in realizations])


def evolve_ensemble(u0: np.ndarray, p: PhysParams, n_trunc: int, dt: float, increments: np.ndarray,
                    observe=None, nonlinear: bool = True) -> np.ndarray:
    """Step R realizations together; returns observe(states) at every node.

    ``u0`` is (R, 4, M) or (4, M); ``increments`` is (R, steps, d).  With
    ``observe`` None the full (R, steps + 1, 4, M) stack is returned.  Each
    realization follows exactly the arithmetic of :func:`evolve`.
    """
    stepper = Stepper(n_trunc, p, dt, nonlinear)
    R, steps, _ = increments.shape
    a = np.broadcast_to(u0, (R,) + stepper.expo.shape).copy()
    if observe is None:
        def observe(x):
            return x.copy()
    first = np.asarray(observe(a))
    out = np.empty((steps + 1,) + first.shape, dtype=first.dtype)
    out[0] = first
    for i in range(steps):
        a = stepper(a, increments[:, i])
        _check_blowup(a, i + 1)
        out[i + 1] = observe(a)
    return np.moveaxis(out, 0, 1)


def unshift(shifted: Trajectory) -> np.ndarray:
    """ubar + sigma W at every node, shape (steps + 1, 4, M)."""
    t = truncation(shifted.n_trunc)
    w = noise_state(t, shifted.params, shifted.path.cumulative()[: shifted.steps + 1])
    return shifted.states + w


def worker_count(requested: int | None = None) -> int:
    env = os.environ.get("BSQ_WORKERS")
    if requested is None and env:
        requested = int(env)
    return max(1, requested or 1)


def parallel_map(fn, items, workers: int | None = None) -> list:
    """Order-preserving map; serial when one worker is requested."""
    workers = worker_count(workers)
    items = list(items)
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))
