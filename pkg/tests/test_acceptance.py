"""Acceptance gate: one PASS/FAIL line per criterion (collected in the terminal summary).

Each test evaluates its criterion exactly at the stated tolerance, records the
measured numbers, and then asserts.  Several criteria are Monte Carlo
experiments with fixed seeds; they take minutes, not seconds.
"""

import math
import time

import numpy as np
import pytest
import scipy.linalg

from bsq.brackets import (approximate_basis, assemble_recipe, canonical_modes, combination_state,
                          generate_sigma, generate_span, junk, product_psi_psi, product_psi_sigma,
                          low_wavevectors, quad_form_Q, tail_budget, verification_matrix)
from bsq.cli import main
from bsq.dynamics import (NoisePath, ensemble_increments, evolve, evolve_ensemble, noise_layout,
                          realization_rng)
from bsq.ergodics import (Observable, clt_histogram, ensemble_series, linear_decay_rate, lln_probe,
                          mixing_probe)
from bsq.ergodics import _Observe
from bsq.malliavin import control_decay_experiment, hypoellipticity_probe, ito_isometry_check
from bsq.spectral import (E1, E2, BasisElement, PhysParams, SpectralState, add_basis, advect_B,
                          basis_vector, embed, mode, project, psi, random_state, sigma, truncation,
                          weighted_norm)
from bsq.variational import LinearizedFlow, linearization_matrix

from conftest import record

pytestmark = pytest.mark.acceptance

P = PhysParams(1.0, 0.7, 1.3)


def test_criterion_01_bracket_calculus():
    t0 = time.time()
    states = [random_state(12, realization_rng(101, s), band=2) for s in range(5)]
    rows = verification_matrix(P, 3, states, h=1e-3)
    elapsed = time.time() - t0
    in_band = sum(3.5 <= r["ratio"] <= 4.5 for r in rows)
    spread = max(r.get("u_spread", 0.0) for r in rows)
    worst = max(r["rel_err"] for r in rows)
    ratios = np.array([r["ratio"] for r in rows if np.isfinite(r["ratio"])])
    ok = in_band == len(rows) and spread <= 1e-8 and elapsed < 300
    record(1, ok, f"ratio in [3.5,4.5] for {in_band}/{len(rows)} rows (median ratio {np.median(ratios):.2f}); "
                  f"max closed-form vs FD rel. discrepancy {worst:.1e}; [Z,sigma] U-spread {spread:.1e}; "
                  f"{elapsed:.0f}s")
    assert ok


def test_criterion_02_product_identities():
    n = 8
    modes = canonical_modes(4)
    worst = 0.0
    count = 0
    for j in modes:
        for k in modes:
            for m in (0, 1):
                pj = basis_vector(psi(j, m), n)
                for mp in (0, 1):
                    for kind, fn in (("sigma", product_psi_sigma), ("psi", product_psi_psi)):
                        other = basis_vector(BasisElement(kind, k, mp), n)
                        diff = advect_B(pj, other) - combination_state(fn(j, m, k, mp), n)
                        worst = max(worst, float(np.abs(diff.coeffs).max()))
                        count += 1
    ok = worst <= 1e-12
    record(2, ok, f"{count} products over {len(modes)} modes |j|,|k|<=4; max coefficient error {worst:.1e}")
    assert ok


def _certificate_holds(target, cert, p):
    """Rebuild sigma_target from [Z_j, sigma_k] and compare with g * prefactor * sigma."""
    from fractions import Fraction

    j, k, pre = cert
    if not isinstance(pre, Fraction) or pre == 0:
        return False
    recipes = [r for r in generate_sigma(j, k)["recipes"] if r.target.index.canonical()[0] == target]
    n = max(_sup(j) + _sup(k), 1)
    for rec in recipes:
        got = assemble_recipe(j, k, rec, p, n)
        want = basis_vector(rec.target, n) * (p.g * float(rec.prefactor))
        if rec.prefactor == 0 or np.abs((got - want).coeffs).max() > 1e-12:
            return False
    return len(recipes) == 2


def _sup(j):
    return max(abs(j.j1), abs(j.j2))


def test_criterion_03_span_coverage():
    t0 = time.time()
    covered, certified, checked, details = [], True, 0, []
    for N in range(1, 6):
        led = generate_span([E1, E2], N)
        covered.append(led.covered)
        for c, cert in led.certificates.items():
            certified &= _certificate_holds(c, cert, P)
            checked += 1
        details.append(f"I_{N}:{'ok' if led.covered else 'gap'}(depth {led.depth})")
    neg = generate_span([mode(2, 0), mode(0, 2)], 1)
    elapsed = time.time() - t0
    ok = all(covered) and certified and not neg.covered and elapsed < 60
    record(3, ok, f"{' '.join(details)}; {checked} certificates with exact nonzero prefactors "
                  f"rebuilt numerically={certified}; {{(2,0),(0,2)}} leaves {len(neg.uncovered)} "
                  f"I_1 modes uncovered; {elapsed:.1f}s")
    assert ok


def test_criterion_04_error_terms():
    n = 28
    Ns = np.arange(2, 9)
    max_omega, max_affine, worst_slope = 0.0, 0.0, -np.inf
    omega_by_kind = {"axis": 0.0, "off-axis": 0.0}
    for trial in range(3):
        rng = realization_rng(404, trial)
        U = random_state(n, rng, band=12)
        V = random_state(n, rng, band=12)
        for j in low_wavevectors(2, n):
            for m in (0, 1):
                J = junk(j, m, U, P)
                w = float(np.abs(J.coeffs[:2]).max())
                kind = "axis" if j.j1 == 0 else "off-axis"
                omega_by_kind[kind] = max(omega_by_kind[kind], w)
                max_omega = max(max_omega, w)
                JV = junk(j, m, V, P)
                mid = junk(j, m, (U + V) * 0.5, P)
                # affine: midpoint value equals the average of the endpoint values
                scale = max(1.0, float(np.abs(J.coeffs).max()))
                max_affine = max(max_affine, float(np.abs((mid - (J + JV) * 0.5).coeffs).max()) / scale)
                norms = [weighted_norm(project(J, N, "high"), P) for N in Ns]
                worst_slope = max(worst_slope, float(np.polyfit(np.log(Ns), np.log(norms), 1)[0]))
    ok = max_omega == 0.0 and max_affine <= 1e-12 and worst_slope <= -0.4
    record(4, ok, f"max |omega part| {max_omega:.1e} (axis modes {omega_by_kind['axis']:.1e}, "
                  f"off-axis {omega_by_kind['off-axis']:.1e}; exact zero required); affinity defect {max_affine:.1e}; "
                  f"steepest-case tail slope over N~=2..8 is {worst_slope:.2f} (need <= -0.4)")
    assert ok


def _cone_member(low, high, alpha, rng, p):
    """Random unit phi with |P_N phi|^2 >= alpha |phi|^2."""
    a = rng.uniform(alpha, 1.0)
    lo = SpectralState(rng.standard_normal(low.coeffs.shape) * low.coeffs, low.n_trunc)
    hi = SpectralState(rng.standard_normal(high.coeffs.shape) * high.coeffs, high.n_trunc)
    lo = lo / weighted_norm(lo, p)
    hi = hi / weighted_norm(hi, p)
    return lo * math.sqrt(a) + hi * math.sqrt(1 - a)


def test_criterion_05_quadratic_form_chain():
    alpha, N, Nt, n = 0.5, 2.0, 8.0, 18
    p = P
    path = NoisePath.generate(505, 600, 1e-2, p.d)
    traj = evolve(SpectralState.zeros(6), p, 6.0, path)
    samples = [embed(traj.state(i), n) for i in range(150, 601, 50)]
    ones = SpectralState(np.ones((4, truncation(n).M)), n)
    low, high = project(ones, N), project(ones, N, "high")
    rng = realization_rng(505, 1)
    worst_margin, checks = np.inf, 0
    for U in samples:
        basis = approximate_basis(N, Nt, U, p)
        budget = tail_budget(N, Nt, U, p)
        for _ in range(100):
            phi = _cone_member(low, high, alpha, rng, p)
            q = quad_form_Q(N, Nt, U, phi, p, basis)
            worst_margin = min(worst_margin, q - (alpha / 2 - budget))
            checks += 1
    ok = worst_margin >= 0
    record(5, ok, f"{checks} (phi, U) pairs; min of <Q phi,phi> - (alpha/2 - tail budget) = {worst_margin:.3e}")
    assert ok


def _duality_defects(dt, fine_path, u0, pairs, rng_seed):
    p = P
    path = fine_path.coarsen(int(round(dt / fine_path.dt)))
    traj = evolve(u0, p, 1.0, path)
    flow = LinearizedFlow(traj)
    t = truncation(u0.n_trunc)
    rng = realization_rng(rng_seed, 0)
    xi = rng.standard_normal((pairs, 4, t.M))
    phi = rng.standard_normal((pairs, 4, t.M))
    jx = flow.forward(0, traj.steps, xi)
    kp = flow.backward(0, traj.steps, phi)
    lhs, rhs = t.inner(jx, phi, p), t.inner(xi, kp, p)
    norms = np.sqrt(t.inner(xi, xi, p) * t.inner(phi, phi, p))
    return np.abs(lhs - rhs) / norms


def test_criterion_06_duality():
    n = 6
    defects = {1e-3: [], 5e-4: []}
    for traj_id in range(5):
        fine = NoisePath.generate(606, 2000, 5e-4, P.d, realization=traj_id)
        u0 = random_state(n, realization_rng(606, 100 + traj_id), scale=0.5)
        for dt in defects:
            defects[dt].extend(_duality_defects(dt, fine, u0, 10, traj_id))
    coarse, halved = np.array(defects[1e-3]), np.array(defects[5e-4])
    bound = coarse.max() <= 1e-6
    improves = np.median(halved) < np.median(coarse)
    ok = bound and improves
    record(6, ok, f"50 pairs at dt=1e-3: max defect {coarse.max():.1e} (bound 1e-6 {'met' if bound else 'missed'}); "
                  f"median {np.median(coarse):.1e} -> {np.median(halved):.1e} at dt/2 "
                  f"({'improves' if improves else 'no improvement: defect is rounding error'})")
    assert ok


def test_criterion_07_hypoellipticity():
    p = PhysParams(1.0, 0.7, 1.3)
    flat = PhysParams.uncoupled(p.nu1, p.nu2, omega_weight=p.zeta, alphas=p.alphas)
    rows = hypoellipticity_probe(p, 100, n_trunc=6, dt=1e-2, seed=707, alpha=0.5, N=1, burn_in=2.0,
                                 compare=flat)
    vals = np.array([r["cone_min"] for r in rows])
    cmp = np.array([r["compare_cone_min"] for r in rows])
    positive = int((vals > 0).sum())
    med, med0 = float(np.median(vals)), float(np.median(cmp))
    reduced = med0 <= med / 10
    ok = positive == 100 and reduced
    record(7, ok, f"cone_min > 0 on {positive}/100 (median {med:.2e}, min {vals.min():.2e}); "
                  f"g=0 median {med0:.2e} (reduction {'>= 10x' if reduced else '< 10x'})")
    assert ok


def test_criterion_08_energy_oracle():
    p = PhysParams(1.0, 1.5, 1.0)
    dt, n = 1e-2, 6
    kappa = p.kappa
    steps = int(round(5.0 / dt))
    det = p.with_alphas({})
    worst = -np.inf
    for r in range(20):
        u0 = random_state(n, realization_rng(808, r), scale=2.0)
        traj = evolve(u0, det, 5.0, NoisePath.zeros(steps, dt, 0))
        t = truncation(n)
        e = t.inner(traj.states, traj.states, p)
        bound = (1 + 5 * dt) * np.exp(-kappa * traj.times) * e[0]
        worst = max(worst, float(np.max(e / bound)))
    ok = worst <= 1.0
    record(8, ok, f"20 states, t<=5, dt={dt}: max |U(t)|^2 / ((1+5dt) e^(-kappa t) |U0|^2) = {worst:.4f}")
    assert ok


def _closed_form_reference(p, n, u0, inc, T):
    """Exact linear solution per mode block, stochastic integral on the fine grid."""
    t = truncation(n)
    L = linearization_matrix(n).matrix(np.zeros((4, t.M)), p, nonlinear=False)
    L -= np.diag(t.dissipation(np.ones((4, t.M)), p).ravel())
    rows, idx, amp = noise_layout(t, p)
    S = np.zeros((t.dim, p.d))
    S[rows * t.M + idx, np.arange(p.d)] = amp
    dtf = T / inc.shape[1]
    # L is block diagonal over modes, so expm(L) is the per-mode closed form
    step = scipy.linalg.expm(L * dtf)
    half = scipy.linalg.expm(L * dtf / 2)
    x = np.broadcast_to(u0.coeffs.ravel(), (inc.shape[0], t.dim)).copy()
    for i in range(inc.shape[1]):
        x = x @ step.T + (inc[:, i] @ S.T) @ half.T
    return x


def test_criterion_09_integrator_order():
    p, n, T, R, fine = P, 2, 1.0, 200, 2**12
    u0 = random_state(n, realization_rng(909, 0))
    inc = ensemble_increments(909, range(R), fine, T / fine, p.d)
    ref = _closed_form_reference(p, n, u0, inc, T)
    dts, errs = [], []
    for steps in (16, 32, 64, 128, 256):
        f = fine // steps
        coarse = inc.reshape(R, steps, f, p.d).sum(axis=2)
        out = evolve_ensemble(u0.coeffs, p, n, T / steps, coarse, nonlinear=False)[:, -1].reshape(R, -1)
        errs.append(float(np.mean(np.linalg.norm(out - ref, axis=1))))
        dts.append(T / steps)
    slope = float(np.polyfit(np.log(dts), np.log(errs), 1)[0])
    iso = ito_isometry_check(lambda w, s: w, 100_000, T=1.0, steps=100, d=4, seed=910)
    ok = slope >= 0.95 and abs(iso["z"]) <= 3
    record(9, ok, f"strong error slope {slope:.3f} (errors {errs[0]:.2e}..{errs[-1]:.2e}); "
                  f"Ito isometry with v=W at 1e5 samples: Var {iso['variance']:.4f} vs "
                  f"E int|v|^2 {iso['expected']:.4f}, z={iso['z']:.2f}")
    assert ok


def test_criterion_10_control_decay():
    p = PhysParams(5.0, 5.0, 1.0)
    rep = control_decay_experiment(p, 1.0, 10, 200, n_trunc=4, dt=1e-2, seed=1010, burn_in=1.0)
    lo, hi = rep["ci95"]
    ok = rep["contraction"] < 1 and hi < 1
    record(10, ok, f"per-stage contraction of E|rho|^8 = {rep['contraction']:.3e}, 95% CI [{lo:.3e}, {hi:.3e}] "
                   f"over 200 realizations, K=10")
    assert ok


def _bimodal(amplitude, n):
    def initial(r):
        u = SpectralState.zeros(n)
        add_basis(u, sigma(E1, 0), amplitude if r % 2 == 0 else -amplitude)
        return u
    return initial


def test_criterion_11_ergodic_probes():
    p = PhysParams(1.0, 1.5, 1.0)
    phi = Observable("pairing", basis=sigma(E1, 0))
    lln = lln_probe(p, phi, [5.0, 10.0, 20.0, 40.0], 40, n_trunc=3, dt=2e-2, seed=1111)
    clt = clt_histogram(p, phi, 16.0, 2000, n_trunc=4, dt=1e-2, seed=1112, horizons=[2.0, 4.0, 8.0, 16.0],
                        initial=_bimodal(6.0, 4))
    ks = [lvl["ks"] for lvl in clt["levels"]]
    ks_trend = all(b < a for a, b in zip(ks, ks[1:]))
    rng = realization_rng(1113, 0)
    init = [random_state(3, rng) for _ in range(3)]
    mix = mixing_probe(p.with_alphas({}), Observable("energy"), init, 15.0, dt=1e-2, reference=0.0)
    target = 2 * linear_decay_rate(p, 3)
    rate_ok = all(abs(r - target) <= 0.1 * target for r in mix["rates"])
    ok = lln["contracting"] and ks_trend and rate_ok
    record(11, ok, f"LLN increments {', '.join(f'{x:.3f}' for x in lln['cauchy'])}; "
                   f"CLT KS {', '.join(f'{x:.3f}' for x in ks)}; energy mixing rates "
                   f"{', '.join(f'{x:.3f}' for x in mix['rates'])} vs {target:.3f}")
    assert ok


CONFIG = """
[physics]
nu1 = 1.0
nu2 = 0.7
g = 1.3
[truncation]
n_trunc = 4
[integration]
dt = 0.01
T = 0.5
[noise]
realizations = 3
"""


def test_criterion_12_reproducibility(tmp_path, monkeypatch):
    cfg = tmp_path / "c.ini"
    cfg.write_text(CONFIG)
    monkeypatch.delenv("BSQ_WORKERS", raising=False)
    monkeypatch.delenv("BSQ_SEED", raising=False)
    outs = []
    for name in ("a", "b"):
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        outs.append(tmp_path / name)
    files = sorted(f.name for f in outs[0].iterdir())
    serial_same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)

    phi = _Observe(Observable("energy"), P, 4)
    serial = ensemble_series(P, 4, 1e-2, 1.0, 8, phi, seed=1212, workers=1)
    again = ensemble_series(P, 4, 1e-2, 1.0, 8, phi, seed=1212, workers=1)
    parallel = ensemble_series(P, 4, 1e-2, 1.0, 8, phi, seed=1212, workers=2)
    monkeypatch.setenv("BSQ_WORKERS", "2")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 0
    from bsq.io import load_trajectory
    par_traj = max(float(np.abs(load_trajectory(tmp_path / "c" / f).states
                                - load_trajectory(outs[0] / f).states).max())
                   for f in files if f.endswith(".bsq1"))
    par_red = float(np.abs(serial.mean(axis=0) - parallel.mean(axis=0)).max())
    ok = serial_same and np.array_equal(serial, again) and par_traj <= 1e-12 and par_red <= 1e-12
    record(12, ok, f"serial CLI re-run byte-identical={serial_same} ({len(files)} files); "
                   f"parallel vs serial: trajectories {par_traj:.1e}, ensemble means {par_red:.1e}")
    assert ok
