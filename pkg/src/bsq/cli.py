"""Command-line driver: ``bsq <subcommand> --config PATH [--seed S] [--out DIR]``.

Exit codes: 0 success, 1 invalid configuration, 2 numerical blow-up,
3 a built-in check on the results failed.  ``BSQ_SEED`` and ``BSQ_WORKERS``
override the config (``--seed`` beats ``BSQ_SEED``).  If a run stops early
the output directory gets a ``PARTIAL`` file listing what was written.
"""

from __future__ import annotations

import argparse
import hashlib
import math
import os
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, parse_config
from .dynamics import BlowUpError, NoisePath, evolve, parallel_map, realization_rng
from .io import save_trajectory, write_csv
from .spectral import E1, SpectralState, TruncationError, random_state, sigma, weighted_norm

EXIT_OK, EXIT_CONFIG, EXIT_BLOWUP, EXIT_CHECK = 0, 1, 2, 3

SUBCOMMANDS = ("simulate", "brackets-verify", "span", "malliavin-probe", "control-decay",
               "ergodic-stats", "cascade")


class CheckFailed(RuntimeError):
    pass


class Run:
    """Output directory bookkeeping: stamped CSVs and the list of artifacts."""

    def __init__(self, cfg: ExperimentConfig, out: Path, workers: int):
        self.cfg, self.out, self.workers = cfg, out, workers
        self.artifacts: list[Path] = []
        out.mkdir(parents=True, exist_ok=True)

    def csv(self, name, columns, rows, note=""):
        path = write_csv(self.out / name, columns, rows, self.cfg.hash, self.cfg.seed, note)
        self.artifacts.append(path)
        return path

    def flag_partial(self, reason: str):
        lines = [f"# bsq {__version__} config={self.cfg.hash} seed={self.cfg.seed}", f"stopped: {reason}"]
        lines += [f"wrote {p.name}" for p in self.artifacts]
        (self.out / "PARTIAL").write_text("\n".join(lines) + "\n")


# ---- subcommands -----------------------------------------------------------

def _simulate_one(args):
    p, n, dt, T, seed, r = args
    path = NoisePath.generate(seed, int(round(T / dt)), dt, p.d, realization=r)
    return evolve(SpectralState.zeros(n), p, T, path)


def cmd_simulate(run: Run) -> int:
    c = run.cfg
    p = c.params()
    jobs = [(p, c.n_trunc, c.dt, c.T, c.seed, r) for r in range(c.realizations)]
    rows = []
    for r, traj in enumerate(parallel_map(_simulate_one, jobs, run.workers)):
        path = save_trajectory(traj, run.out / f"trajectory_r{r:04d}.bsq1")
        run.artifacts.append(path)
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        rows.append([r, path.name, traj.steps, weighted_norm(traj.final(), p) ** 2, digest])
    run.csv("simulate.csv", ["realization", "file", "steps", "final_energy", "sha256"], rows)
    return EXIT_OK


def _verify_states(c: ExperimentConfig, radius: float, count: int = 5):
    band = 2
    n = 2 * band + 2 * math.ceil(radius) + 2
    return [random_state(n, realization_rng(c.seed, s), band=band) for s in range(count)]


def cmd_brackets_verify(run: Run) -> int:
    from .brackets import verification_matrix

    c = run.cfg
    rows = verification_matrix(c.params(), c.jmax, _verify_states(c, c.jmax))
    cols = ["field", "j", "m", "k", "mp", "state", "err_h", "err_h2", "ratio", "rel_err", "u_spread",
            "ratio_in_band"]
    out = [[r["field"], r["j"], r["m"], r["k"], r["mp"], r["state"], r["err_h"], r["err_h2"], r["ratio"],
            r["rel_err"], r.get("u_spread", ""), 3.5 <= r["ratio"] <= 4.5] for r in rows]
    worst = max(r["rel_err"] for r in rows)
    spread = max(r.get("u_spread", 0.0) for r in rows)
    run.csv("brackets.csv", cols, out, note=f"max_rel_err={worst:.3e} max_u_spread={spread:.3e}")
    if worst > 1e-7 or spread > 1e-8:
        raise CheckFailed(f"closed forms disagree with finite differences (rel {worst:.2e}, spread {spread:.2e})")
    return EXIT_OK


def cmd_span(run: Run) -> int:
    from .brackets import generate_span

    c = run.cfg
    N = int(round(c.N))
    led = generate_span(c.forced_modes, N, depth_cap=c.depth_cap)
    rows = []
    for kind, store in (("sigma", led.sigma), ("psi", led.psi)):
        for j in sorted(store, key=lambda x: (x.j1, x.j2)):
            rows.append([kind, str(j), store[j], led.recipes.get((kind, j), "forced"), j in led.targets])
    for j in sorted(led.uncovered, key=lambda x: (x.j1, x.j2)):
        rows.append(["uncovered", str(j), "", "", True])
    run.csv("span.csv", ["kind", "mode", "depth", "recipe", "target"], rows,
            note=f"N={N} covered={led.covered} depth={led.depth}")
    if not led.covered:
        raise CheckFailed(f"span search left {len(led.uncovered)} target modes uncovered")
    return EXIT_OK


def cmd_malliavin_probe(run: Run) -> int:
    from .malliavin import hypoellipticity_probe

    c = run.cfg
    rows = hypoellipticity_probe(c.params(), c.realizations, n_trunc=c.n_trunc, dt=c.dt, seed=c.seed,
                                 alpha=c.alpha, N=c.N, burn_in=c.burn_in, workers=run.workers)
    cols = ["realization", "alpha", "N", "cone_min", "min_eig", "trace"]
    run.csv("malliavin.csv", cols, [[r[k] for k in cols] for r in rows])
    bad = [r["realization"] for r in rows if not r["cone_min"] > 0]
    if bad:
        raise CheckFailed(f"cone_min not positive on realizations {bad}")
    return EXIT_OK


def cmd_control_decay(run: Run) -> int:
    from .malliavin import control_decay_experiment

    c = run.cfg
    rep = control_decay_experiment(c.params(), c.beta, c.K, c.realizations, n_trunc=c.n_trunc, dt=c.dt,
                                   seed=c.seed, burn_in=c.burn_in, workers=run.workers)
    lo, hi = rep["ci95"]
    rows = [[s, m] for s, m in zip(rep["stages"], rep["moment8"])]
    run.csv("control_decay.csv", ["time", "mean_rho_pow8"], rows,
            note=f"contraction={rep['contraction']:.6g} ci95=[{lo:.6g},{hi:.6g}]")
    if not hi < 1:
        raise CheckFailed(f"per-stage contraction interval [{lo:.3g}, {hi:.3g}] does not exclude 1")
    return EXIT_OK


def _mode_observable():
    from .ergodics import Observable
    return Observable("mode", basis=sigma(E1, 0))


def cmd_ergodic_stats(run: Run) -> int:
    from .ergodics import clt_histogram, lln_probe

    c = run.cfg
    p = c.params()
    phi = _mode_observable()
    horizons = [c.T * 2**i for i in range(4)]
    lln = lln_probe(p, phi, horizons, c.realizations, n_trunc=c.n_trunc, dt=c.dt, seed=c.seed,
                    workers=run.workers)
    clt = clt_histogram(p, phi, horizons[-1], c.realizations, n_trunc=c.n_trunc, dt=c.dt, seed=c.seed,
                        horizons=horizons, workers=run.workers)
    rows = []
    for i, h in enumerate(horizons):
        lvl = clt["levels"][i]
        cauchy = lln["cauchy"][i - 1] if i else ""
        rows.append([h, cauchy, lvl["variance"], lvl["ks"]])
    run.csv("ergodics.csv", ["horizon", "lln_increment", "clt_variance", "clt_ks"], rows)
    bins = [[lvl["horizon"], left, count] for lvl in clt["levels"] for left, count in lvl["bins"]]
    run.csv("clt_bins.csv", ["horizon", "left_edge", "count"], bins)
    ks = [lvl["ks"] for lvl in clt["levels"]]
    if not lln["contracting"] or not all(b < a for a, b in zip(ks, ks[1:])):
        raise CheckFailed("LLN or CLT trend is not monotone over the horizon doublings")
    return EXIT_OK


def cmd_cascade(run: Run) -> int:
    from .brackets import cascade_probe, chain_field

    c = run.cfg
    p = c.params()
    n = c.n_trunc
    j = c.forced_modes[0]
    k = c.forced_modes[-1]
    path = NoisePath.generate(c.seed, int(round(c.T / c.dt)), c.dt, p.d)
    traj = evolve(SpectralState.zeros(n), p, c.T, path)
    phi = random_state(n, realization_rng(c.seed, 10**6))
    phi = phi / weighted_norm(phi, p)
    chain = [chain_field("sigma", p, n, j, 0), chain_field("Y", p, n, j, 0), chain_field("Z", p, n, j, 0),
             chain_field("Zsigma", p, n, j, 0, k, 1), chain_field("ZY", p, n, j, 0, k, 1)]
    rep = cascade_probe(traj, phi, chain)
    rows = []
    for name, s in rep["series"].items():
        for t, v, d, q in zip(rep["times"], s["values"], s["derivative"], s["predicted"]):
            rows.append([name, t, v, d, q])
    run.csv("cascade.csv", ["field", "time", "pairing", "derivative", "predicted"], rows)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "brackets-verify": cmd_brackets_verify,
    "span": cmd_span,
    "malliavin-probe": cmd_malliavin_probe,
    "control-decay": cmd_control_decay,
    "ergodic-stats": cmd_ergodic_stats,
    "cascade": cmd_cascade,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage mistakes are validation failures, not numerical ones
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="bsq", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"bsq {__version__}")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, type=Path)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", type=Path, default=None)
    return ap


def resolve(args, environ=None) -> tuple[ExperimentConfig, Path, int]:
    environ = os.environ if environ is None else environ
    cfg = parse_config(args.config.read_text())
    seed = args.seed
    if seed is None and environ.get("BSQ_SEED"):
        seed = int(environ["BSQ_SEED"])
    if seed is not None:
        if seed < 0:
            raise ConfigError([f"seed must be non-negative (got {seed})"])
        cfg = cfg.with_seed(seed)
    workers = int(environ["BSQ_WORKERS"]) if environ.get("BSQ_WORKERS") else cfg.workers
    out = args.out if args.out is not None else Path(cfg.out_dir)
    return cfg, out, workers


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, out, workers = resolve(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"bsq: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(cfg, out, workers)
    try:
        code = COMMANDS[args.subcommand](run)
    except BlowUpError as exc:
        run.flag_partial(str(exc))
        print(f"bsq: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    except (CheckFailed, TruncationError) as exc:
        run.flag_partial(str(exc))
        print(f"bsq: check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    print(f"bsq {args.subcommand}: wrote {len(run.artifacts)} artifact(s) to {out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
