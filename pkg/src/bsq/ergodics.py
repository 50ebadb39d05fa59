"""Empirical ergodicity diagnostics: time averages, moments, coupling, LLN/CLT, mixing.

Everything here is a Monte Carlo or trajectory post-processing tool; none of
the asymptotic constants of the underlying theory are estimated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.stats
from numpy.polynomial.legendre import leggauss

from .dynamics import (BlowUpError, Trajectory, ensemble_increments, evolve_ensemble, parallel_map,
                       realization_rng, worker_count)
from .spectral import BasisElement, PhysParams, SpectralState, truncation, weighted_norm

BURN_IN_FRACTION = 0.1


@dataclass(frozen=True)
class Observable:
    """Scalar function of the state.

    kind: "mode" (coefficient of ``basis``), "pairing" (weighted pairing with
    the unit-coefficient ``basis`` direction), "energy" (weighted squared norm),
    "enstrophy" (weighted squared H1 seminorm), "quadratic" (x^T Q x on the
    flattened coefficients) or "constant".
    """

    kind: str
    basis: BasisElement | None = None
    matrix: np.ndarray | None = None
    value: float = 1.0
    varsigma: float = 0.0

    def batch(self, states: np.ndarray, p: PhysParams, n_trunc: int) -> np.ndarray:
        """Evaluate on a stack of coefficient arrays (..., 4, M)."""
        t = truncation(n_trunc)
        if self.kind == "mode":
            j, sign = self.basis.index.canonical()
            return states[..., self.basis.row, t.index(j)] * sign**self.basis.parity
        if self.kind == "pairing":
            j, sign = self.basis.index.canonical()
            w = t.weights(p)[self.basis.row, 0]
            return w * states[..., self.basis.row, t.index(j)] * sign**self.basis.parity
        if self.kind == "energy":
            return np.sum(t.weights(p) * states**2, axis=(-2, -1))
        if self.kind == "enstrophy":
            return np.sum(t.weights(p) * t.k_sq * states**2, axis=(-2, -1))
        if self.kind == "quadratic":
            flat = states.reshape(states.shape[:-2] + (-1,))
            return np.einsum("...i,ij,...j->...", flat, self.matrix, flat)
        if self.kind == "constant":
            return np.full(states.shape[:-2], float(self.value))
        raise ValueError(f"unknown observable kind {self.kind!r}")

    def __call__(self, u: SpectralState, p: PhysParams) -> float:
        return float(self.batch(u.coeffs, p, u.n_trunc))


def _trapezoid(y: np.ndarray, dt: float, axis: int = -1) -> np.ndarray:
    return np.trapezoid(y, dx=dt, axis=axis) if hasattr(np, "trapezoid") else np.trapz(y, dx=dt, axis=axis)


def time_average(traj: Trajectory, phi: Observable, burn_in: float | None = None) -> float:
    """(1 / (T - burn_in)) * integral of phi(U(t)) over [burn_in, T] by trapezoid."""
    T = traj.horizon
    if burn_in is None:
        burn_in = BURN_IN_FRACTION * T
    if not 0 <= burn_in < T:
        raise ValueError("burn_in must lie in [0, horizon)")
    i0 = traj.node(burn_in)
    vals = phi.batch(traj.states[i0:], traj.params, traj.n_trunc)
    return float(_trapezoid(vals, traj.dt) / (T - traj.times[i0]))


def _chunk(args):
    p, n_trunc, dt, steps, seed, reals, u0, observe, stochastic = args
    if stochastic:
        inc = ensemble_increments(seed, reals, steps, dt, p.d)
    else:
        inc = np.zeros((len(reals), steps, p.d))
    return evolve_ensemble(u0, p, n_trunc, dt, inc, observe)


def ensemble_series(p: PhysParams, n_trunc: int, dt: float, T: float, realizations: int, observe, *,
                    seed: int = 0, u0=None, stochastic: bool = True,
                    workers: int | None = None) -> np.ndarray:
    """observe(states) along R realizations, shape (R, steps + 1, ...).

    ``u0`` is None (rest), a (4, M) array shared by all realizations, or an
    (R, 4, M) stack.  Realizations are split into contiguous blocks, one per
    worker; realization r always uses noise stream r of ``seed``.
    """
    steps = int(round(T / dt))
    M = truncation(n_trunc).M
    if u0 is None:
        u0 = np.zeros((4, M))
    u0 = np.asarray(u0, dtype=float)
    nw = min(worker_count(workers), max(realizations, 1))
    blocks = np.array_split(np.arange(realizations), nw)
    args = []
    for b in blocks:
        if len(b) == 0:
            continue
        init = u0[b] if u0.ndim == 3 else u0
        args.append((p, n_trunc, dt, steps, seed, b.tolist(), init, observe, stochastic))
    return np.concatenate(parallel_map(_chunk, args, nw), axis=0)


def _is_stochastic(p: PhysParams) -> bool:
    return any(a != 0 for a in p.alphas.values())


# ---- exponential moments -------------------------------------------------

def dissipation_norm_sq(states: np.ndarray, p: PhysParams, n_trunc: int) -> np.ndarray:
    """zeta nu1 |grad omega|^2 + nu2 |grad theta|^2 per state."""
    t = truncation(n_trunc)
    w = t.weights(p) * np.array([[p.nu1], [p.nu1], [p.nu2], [p.nu2]])
    return np.sum(w * t.k_sq * states**2, axis=(-2, -1))


class _MomentTerms:
    def __init__(self, p, n_trunc):
        self.p, self.n = p, n_trunc

    def __call__(self, a):
        return np.stack([Observable("energy").batch(a, self.p, self.n),
                         Observable("enstrophy").batch(a, self.p, self.n),
                         dissipation_norm_sq(a, self.p, self.n)], axis=-1)


def exp_moment_probe(p: PhysParams, eta: float, T: float, samples: int, *, n_trunc: int = 4,
                     dt: float = 1e-2, seed: int = 0, u0: SpectralState | None = None,
                     workers: int | None = None) -> dict:
    """Monte Carlo check of the exponential moment bound at time T.

    Estimates E exp(eta |U(T)|^2 + eta (kappa/4) e^{-kappa T/4} int |U|_{H1}^2)
    and divides by exp(eta e^{-kappa T/2} |U0|^2).  The exponent is formed in
    log space; an estimate that is not finite is reported as overflow
    (eta too large) instead of returning NaN.  The deterministic branch
    (all alphas zero) also reports the energy-inequality constant
    (|U(T)|^2 + int |U|_D^2) / |U0|^2.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    if u0 is None:
        u0 = SpectralState.zeros(n_trunc)
    kappa = p.kappa
    stochastic = _is_stochastic(p)
    n = samples if stochastic else 1
    series = ensemble_series(p, n_trunc, dt, T, n, _MomentTerms(p, n_trunc), seed=seed,
                             u0=u0.coeffs, stochastic=stochastic, workers=workers)
    rows = np.stack([series[:, -1, 0], _trapezoid(series[:, :, 1], dt, axis=1),
                     _trapezoid(series[:, :, 2], dt, axis=1)], axis=1)
    expo = eta * rows[:, 0] + eta * kappa / 4 * math.exp(-kappa * T / 4) * rows[:, 1]
    ref = eta * math.exp(-kappa * T / 2) * weighted_norm(u0, p) ** 2

    def log_ratio(x):
        m = x.max()
        return float(m + math.log(np.mean(np.exp(x - m))) - ref)

    out = {"eta": eta, "T": T, "samples": n, "overflow": False}
    lr = log_ratio(expo)
    if not math.isfinite(lr) or lr > 700:
        out.update(overflow=True, ratio=math.inf, log_ratio=lr)
    else:
        out.update(ratio=math.exp(lr), log_ratio=lr)
        if n >= 2:
            half = log_ratio(expo[: n // 2])
            out["half_sample_ratio"] = math.exp(half) if half < 700 else math.inf
    if not stochastic:
        e0 = weighted_norm(u0, p) ** 2
        out["energy_constant"] = float((rows[0, 0] + rows[0, 2]) / e0) if e0 > 0 else 0.0
    return out


# ---- synchronous coupling ------------------------------------------------

class _Identity:
    def __call__(self, a):
        return a.copy()


def coupling_decay(p: PhysParams, u1: SpectralState, u2: SpectralState, horizon: float, samples: int,
                   *, dt: float = 1e-2, seed: int = 0, workers: int | None = None) -> dict:
    """Evolve two initial states under identical noise; report E log |U1(t) - U2(t)|.

    The slope is a least-squares fit of the mean log-difference over the
    middle 80% of the window.  Identical inputs give an exactly zero
    difference, reported as -inf logs and a slope of NaN.
    """
    stochastic = _is_stochastic(p)
    n, w = u1.n_trunc, truncation(u1.n_trunc).weights(p)
    runs = [ensemble_series(p, n, dt, horizon, samples, _Identity(), seed=seed, u0=u.coeffs,
                            stochastic=stochastic, workers=workers) for u in (u1, u2)]
    diffs = np.sqrt(np.sum(w * (runs[0] - runs[1]) ** 2, axis=(-2, -1)))
    steps = diffs.shape[1] - 1
    times = dt * np.arange(steps + 1)
    with np.errstate(divide="ignore"):
        logs = np.log(diffs)
    mean_log = logs.mean(axis=0)
    lo, hi = _middle_window(len(times))
    sel = slice(lo, hi)
    if np.all(np.isfinite(mean_log[sel])):
        slope = float(np.polyfit(times[sel], mean_log[sel], 1)[0])
    else:
        slope = float("nan")
    return {"times": times, "differences": diffs, "mean_log": mean_log, "slope": slope}


def _middle_window(n: int, keep: float = 0.8) -> tuple[int, int]:
    cut = int(round(n * (1 - keep) / 2))
    return cut, max(n - cut, cut + 2)


# ---- LLN / CLT -------------------------------------------------------------

def lln_probe(p: PhysParams, phi: Observable, horizons, realizations: int, *, n_trunc: int = 4,
              dt: float = 1e-2, seed: int = 0, workers: int | None = None) -> dict:
    """Horizon-doubling Cauchy check of time averages.

    Each realization is one long run of length max(horizons); the average at
    horizon T uses its prefix with the default burn-in.  Reports the mean
    absolute increment between consecutive horizons.
    """
    horizons = sorted(horizons)
    vals = ensemble_series(p, n_trunc, dt, horizons[-1], realizations, _Observe(phi, p, n_trunc),
                           seed=seed, workers=workers)
    avgs = np.array([[_window_integral(v, dt, h)[0] / _window_integral(v, dt, h)[1] for h in horizons]
                     for v in vals])
    incr = np.abs(np.diff(avgs, axis=1)).mean(axis=0)
    return {"horizons": horizons, "averages": avgs, "cauchy": incr.tolist(),
            "contracting": bool(np.all(np.diff(incr) < 0))}


class _Observe:
    def __init__(self, phi, p, n_trunc):
        self.phi, self.p, self.n = phi, p, n_trunc

    def __call__(self, a):
        return self.phi.batch(a, self.p, self.n)


def _window_integral(vals: np.ndarray, dt: float, h: float) -> tuple[float, float]:
    """Trapezoid integral of a node series over [burn-in, h] and the window length."""
    i1 = int(round(h / dt))
    i0 = int(round(BURN_IN_FRACTION * h / dt))
    return float(_trapezoid(vals[i0:i1 + 1], dt)), (i1 - i0) * dt


def clt_histogram(p: PhysParams, phi: Observable, T: float, samples: int, *, n_trunc: int = 4,
                  dt: float = 1e-2, seed: int = 0, horizons=None, initial=None, bins: int = 20,
                  workers: int | None = None) -> dict:
    """Fluctuations (1/sqrt(T')) int (phi - empirical mean) dt across realizations.

    T' is the horizon after the default burn-in.  ``horizons`` (default [T])
    are nested prefixes of the same runs.  ``initial(r)`` optionally supplies
    the initial state of realization r.  For each horizon the report holds
    the variance, the Kolmogorov-Smirnov distance to the fitted normal, and
    histogram bins as (left edge, count).
    """
    horizons = sorted(horizons or [T])
    T = horizons[-1]
    u0 = None
    if initial is not None:
        u0 = np.stack([initial(r).coeffs for r in range(samples)])
    vals = ensemble_series(p, n_trunc, dt, T, samples, _Observe(phi, p, n_trunc), seed=seed, u0=u0,
                           workers=workers)
    report = []
    for h in horizons:
        pairs = [_window_integral(v, dt, h) for v in vals]
        ints = np.array([x for x, _ in pairs])
        length = pairs[0][1]
        mean_rate = ints.mean() / length
        fluct = (ints - mean_rate * length) / math.sqrt(length)
        var = float(fluct.var(ddof=1))
        if var > 0:
            ks = float(scipy.stats.kstest(fluct, "norm", args=(0.0, math.sqrt(var))).statistic)
        else:
            ks = 0.0
        counts, edges = np.histogram(fluct, bins=bins)
        report.append({"horizon": h, "variance": var, "ks": ks, "fluctuations": fluct,
                       "bins": list(zip(edges[:-1].tolist(), counts.tolist()))})
    return {"horizons": horizons, "levels": report}


# ---- rho_r metric ----------------------------------------------------------

def rho_r_distance(u1: SpectralState, u2: SpectralState, r: float, varsigma: float, p: PhysParams,
                   nodes: int = 64) -> dict:
    """Straight-line upper bound (UB) on the rho_r distance, with its sandwich.

    UB = int_0^1 exp(varsigma r |gamma(s)|^2) |gamma'(s)| ds along the segment,
    by Gauss-Legendre quadrature.  The sandwich is
    |U1 - U2| <= UB <= exp(varsigma r max|U_i|^2) |U1 - U2|.
    """
    if not 0 < r <= 1:
        raise ValueError("r must lie in (0, 1]")
    if not varsigma > 0:
        raise ValueError("varsigma must be positive")
    t = truncation(u1.n_trunc)
    w = t.weights(p)
    a, d = u1.coeffs, u2.coeffs - u1.coeffs
    length = math.sqrt(float(np.sum(w * d * d)))
    x, wq = leggauss(nodes)
    s = 0.5 * (x + 1)
    # |a + s d|^2 is a quadratic in s
    c0, c1, c2 = float(np.sum(w * a * a)), float(np.sum(w * a * d)), length**2
    sq = c0 + 2 * c1 * s + c2 * s * s
    ub = 0.5 * float(np.sum(wq * np.exp(varsigma * r * sq))) * length
    upper = math.exp(varsigma * r * max(c0, c0 + 2 * c1 + c2)) * length
    return {"ub": ub, "lower": length, "upper": upper}


# ---- mixing --------------------------------------------------------------

def mixing_probe(p: PhysParams, phi: Observable, initial: list, horizon: float, *, samples: int = 1,
                 dt: float = 1e-2, seed: int = 0, reference: float | None = None,
                 workers: int | None = None) -> dict:
    """Decay of |E phi(U(t, U0)) - long-run mean| for several initial states.

    The long-run mean is ``reference`` if given, else the pooled average over
    the last 10% of the window.  A rate is fitted per initial state by least
    squares on the log-residual over the middle 80% of the window; the
    fit is a diagnostic only.
    """
    if len(initial) < 2:
        raise ValueError("need at least two initial conditions")
    stochastic = _is_stochastic(p)
    n = samples if stochastic else 1
    curves = []
    for u0 in initial:
        vals = ensemble_series(p, u0.n_trunc, dt, horizon, n, _Observe(phi, p, u0.n_trunc), seed=seed,
                               u0=u0.coeffs, stochastic=stochastic, workers=workers)
        curves.append(vals.mean(axis=0))
    curves = np.array(curves)
    times = dt * np.arange(curves.shape[1])
    if reference is None:
        tail = max(1, int(round(0.1 * len(times))))
        reference = float(curves[:, -tail:].mean())
    resid = np.abs(curves - reference)
    lo, hi = _middle_window(len(times))
    rates = []
    for row in resid:
        sel = row[lo:hi] > 0
        if sel.sum() < 2:
            rates.append(float("nan"))
            continue
        rates.append(float(-np.polyfit(times[lo:hi][sel], np.log(row[lo:hi][sel]), 1)[0]))
    return {"times": times, "curves": curves, "reference": reference, "residuals": resid,
            "rates": rates}


def linear_decay_rate(p: PhysParams, n_trunc: int) -> float:
    """Slowest decay rate of the linearization at rest, from its spectrum."""
    from .variational import linearization_matrix

    t = truncation(n_trunc)
    L = linearization_matrix(n_trunc).matrix(np.zeros((4, t.M)), p, nonlinear=False)
    L -= np.diag(t.dissipation(np.ones((4, t.M)), p).ravel())
    return float(-np.max(np.linalg.eigvals(L).real))


__all__ = [
    "BlowUpError", "Observable", "time_average", "exp_moment_probe", "coupling_decay", "lln_probe",
    "clt_histogram", "rho_r_distance", "mixing_probe", "linear_decay_rate", "realization_rng",
]
