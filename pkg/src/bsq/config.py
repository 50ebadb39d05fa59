"""Strict experiment configuration.

Format: ``[section]`` headers followed by ``key = value`` lines; ``#`` starts
a comment.  Every problem in a file is collected before reporting, so one
run of the parser lists all typos, duplicates and constraint violations.

Sections and keys (defaults in parentheses; [physics] nu1, nu2, g are
required):

    [physics]      nu1, nu2, g, forcing ("(1,0) (0,1)"), amplitude (1.0)
    [truncation]   n_trunc (6), n_tilde (8)
    [integration]  dt (0.01), T (1.0)
    [noise]        seed (0), realizations (1), workers (1)
    [probe]        alpha (0.5), N (1.0), beta (1.0), eta (0.05),
                   varsigma (0.1), K (10), burn_in (2.0), jmax (2),
                   depth_cap (50)
    [output]       dir ("bsq-out")

``forcing`` lists wavevectors, each optionally followed by ``:amplitude``;
both parities of every listed temperature mode are forced, so the default
gives d = 4.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .io import config_hash
from .spectral import ModeIndex, PhysParams, truncation

_MODE = re.compile(r"\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)(?::([^\s]+))?")

# section -> key -> (type, default); default None marks a required key
SCHEMA = {
    "physics": {"nu1": (float, None), "nu2": (float, None), "g": (float, None),
                "forcing": (str, "(1,0) (0,1)"), "amplitude": (float, 1.0)},
    "truncation": {"n_trunc": (int, 6), "n_tilde": (float, 8.0)},
    "integration": {"dt": (float, 0.01), "T": (float, 1.0)},
    "noise": {"seed": (int, 0), "realizations": (int, 1), "workers": (int, 1)},
    "probe": {"alpha": (float, 0.5), "N": (float, 1.0), "beta": (float, 1.0), "eta": (float, 0.05),
              "varsigma": (float, 0.1), "K": (int, 10), "burn_in": (float, 2.0), "jmax": (int, 2),
              "depth_cap": (int, 50)},
    "output": {"dir": (str, "bsq-out")},
}


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {v}" for v in self.violations))


@dataclass(frozen=True)
class ExperimentConfig:
    nu1: float
    nu2: float
    g: float
    alphas: dict
    n_trunc: int
    n_tilde: float
    dt: float
    T: float
    seed: int
    realizations: int
    workers: int
    alpha: float
    N: float
    beta: float
    eta: float
    varsigma: float
    K: int
    burn_in: float
    jmax: int
    depth_cap: int
    out_dir: str
    text: str = field(default="", repr=False)

    @property
    def hash(self) -> str:
        return config_hash(self.text)

    @property
    def forced_modes(self) -> list:
        return sorted({k for k, _ in self.alphas}, key=lambda k: (k.j1, k.j2))

    def params(self) -> PhysParams:
        return PhysParams(self.nu1, self.nu2, self.g, dict(self.alphas))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        from dataclasses import replace
        return replace(self, seed=int(seed))


def _parse_forcing(text: str, default_amp: float, problems: list) -> dict:
    alphas = {}
    rest = _MODE.sub("", text).strip()
    if rest:
        problems.append(f"physics.forcing: cannot parse {rest!r}; expected entries like (1,0) or (1,0):0.5")
    for m in _MODE.finditer(text):
        j = ModeIndex(int(m.group(1)), int(m.group(2)))
        amp = default_amp
        if m.group(3) is not None:
            try:
                amp = float(m.group(3))
            except ValueError:
                problems.append(f"physics.forcing: amplitude {m.group(3)!r} for {j} is not a number")
                continue
        if (j, 0) in alphas:
            problems.append(f"physics.forcing: mode {j} listed twice")
        for par in (0, 1):
            alphas[(j, par)] = amp
    if not alphas and not rest:
        problems.append("physics.forcing: no forced modes")
    return alphas


def _read(text: str, problems: list) -> dict:
    raw: dict = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                problems.append(f"line {lineno}: unknown section [{section}]")
            raw.setdefault(section, {})
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected key = value, got {line!r}")
            continue
        if section is None:
            problems.append(f"line {lineno}: key outside any section")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if section in SCHEMA and key not in SCHEMA[section]:
            problems.append(f"line {lineno}: unknown key {section}.{key}")
            continue
        if key in raw[section]:
            problems.append(f"line {lineno}: duplicate key {section}.{key}")
            continue
        raw[section][key] = value
    return raw


def parse_config(text: str) -> ExperimentConfig:
    """Validated config, or ConfigError listing every violation."""
    problems: list[str] = []
    raw = _read(text, problems)
    vals: dict = {}
    for section, keys in SCHEMA.items():
        given = raw.get(section, {})
        for key, (kind, default) in keys.items():
            if key not in given:
                if default is None:
                    problems.append(f"missing required field {section}.{key}")
                vals[key] = default
                continue
            try:
                vals[key] = kind(given[key])
            except ValueError:
                problems.append(f"{section}.{key}: {given[key]!r} is not a valid {kind.__name__}")
                vals[key] = default
    alphas = _parse_forcing(vals["forcing"], vals["amplitude"] or 1.0, problems)
    _check(vals, alphas, problems)
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        nu1=vals["nu1"], nu2=vals["nu2"], g=vals["g"], alphas=alphas,
        n_trunc=vals["n_trunc"], n_tilde=vals["n_tilde"], dt=vals["dt"], T=vals["T"],
        seed=vals["seed"], realizations=vals["realizations"], workers=vals["workers"],
        alpha=vals["alpha"], N=vals["N"], beta=vals["beta"], eta=vals["eta"],
        varsigma=vals["varsigma"], K=vals["K"], burn_in=vals["burn_in"], jmax=vals["jmax"],
        depth_cap=vals["depth_cap"], out_dir=vals["dir"], text=text)


def _check(v: dict, alphas: dict, problems: list) -> None:
    def need(cond, msg):
        if not cond:
            problems.append(msg)

    for key in ("nu1", "nu2"):
        if v[key] is not None:
            need(v[key] > 0, f"physics.{key} must be positive (got {v[key]})")
    if v["g"] is not None:
        need(v["g"] != 0, "physics.g = 0 violates the coupling hypothesis of the ergodicity "
                          "theorem: buoyancy g != 0 is what carries the temperature noise into "
                          "the vorticity")
    n = v["n_trunc"]
    if n is not None:
        need(n >= 1, f"truncation.n_trunc must be at least 1 (got {n})")
    for j, par in alphas:
        if par:
            continue
        need(j.is_canonical(), f"physics.forcing: {j} is not in the canonical half lattice")
        if n is not None and n >= 1:
            need(truncation(n).contains(j), f"physics.forcing: {j} lies outside n_trunc={n}")
        need(alphas[(j, 0)] != 0, f"physics.forcing: amplitude for {j} must be nonzero")
    for key in ("dt", "T", "beta", "eta", "varsigma", "N"):
        if v[key] is not None:
            need(v[key] > 0, f"{key} must be positive (got {v[key]})")
    if v["alpha"] is not None:
        need(0 < v["alpha"] <= 1, f"probe.alpha must lie in (0, 1] (got {v['alpha']})")
    if v["n_tilde"] is not None and v["N"] is not None:
        need(v["n_tilde"] > v["N"], "truncation.n_tilde must exceed probe.N")
    if v["K"] is not None:
        need(v["K"] >= 2 and v["K"] % 2 == 0, f"probe.K must be a positive even integer (got {v['K']})")
    for key in ("realizations", "workers", "jmax", "depth_cap"):
        if v[key] is not None:
            need(v[key] >= 1, f"{key} must be at least 1 (got {v[key]})")
    if v["seed"] is not None:
        need(0 <= v["seed"] < 2**63, f"noise.seed must be a non-negative 63-bit integer (got {v['seed']})")
    if v["burn_in"] is not None:
        need(v["burn_in"] >= 0, "probe.burn_in must be non-negative")
    if v["dt"] and v["T"] and v["dt"] > 0 and v["T"] > 0:
        steps = v["T"] / v["dt"]
        need(abs(steps - round(steps)) < 1e-9 * max(1.0, steps), "integration.T must be a multiple of dt")
