"""Trajectory files and report writers.

Trajectory file layout (little-endian throughout):

    magic      4 bytes  b"BSQ1"
    n_trunc    u32
    steps      u64      number of steps; steps + 1 snapshots follow
    dt         f64
    d          u32      number of forced directions
    seed       u64
    nu1 nu2 g  3 x f64
    sentinel   f64      1.0, guards against byte-order mistakes
    alphas     d x (i32 j1, i32 j2, u32 parity, f64 amplitude)
    snapshots  (steps + 1) x 4 x M f64, rows (omega cos, omega sin,
               theta cos, theta sin), modes in canonical order
               (j1 ascending, then j2 ascending; j1 = 0 only for j2 > 0)

Noise increments are not stored; the seed reproduces them.
"""

from __future__ import annotations

import csv
import hashlib
import io
import struct
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import Trajectory
from .spectral import PhysParams, mode, truncation

MAGIC = b"BSQ1"
SENTINEL = 1.0
_HEAD = struct.Struct("<4sIQdIQdddd")
_ALPHA = struct.Struct("<iiId")


class TrajectoryFormatError(ValueError):
    """Structured load failure: ``reason`` is a short machine-readable tag."""

    def __init__(self, reason: str, detail: str):
        super().__init__(f"{reason}: {detail}")
        self.reason = reason
        self.detail = detail


def encode_trajectory(traj: Trajectory) -> bytes:
    p = traj.params
    head = _HEAD.pack(MAGIC, traj.n_trunc, traj.steps, traj.dt, p.d, int(traj.noise_seed) & (2**64 - 1),
                      p.nu1, p.nu2, p.g, SENTINEL)
    alphas = b"".join(_ALPHA.pack(k.j1, k.j2, m, p.alphas[(k, m)]) for (k, m) in p.forced)
    body = np.ascontiguousarray(traj.states, dtype="<f8").tobytes()
    return head + alphas + body


def save_trajectory(traj: Trajectory, path) -> Path:
    path = Path(path)
    path.write_bytes(encode_trajectory(traj))
    return path


def decode_trajectory(data: bytes) -> Trajectory:
    if len(data) < _HEAD.size:
        raise TrajectoryFormatError("truncated", f"{len(data)} bytes is shorter than the header")
    magic, n_trunc, steps, dt, d, seed, nu1, nu2, g, sentinel = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise TrajectoryFormatError("magic", f"expected {MAGIC!r}, found {magic!r}")
    if sentinel != SENTINEL:
        raise TrajectoryFormatError("endianness", f"sentinel reads {sentinel!r}, expected 1.0")
    if n_trunc < 1 or n_trunc > 4096 or not dt >= 0 or (steps > 0 and dt == 0) or d > 4 * (n_trunc + 1) ** 2:
        raise TrajectoryFormatError("header", f"implausible header n_trunc={n_trunc} dt={dt} d={d}")
    off = _HEAD.size
    if len(data) < off + d * _ALPHA.size:
        raise TrajectoryFormatError("truncated", "forcing table cut short")
    alphas = {}
    for _ in range(d):
        j1, j2, m, a = _ALPHA.unpack_from(data, off)
        alphas[(mode(j1, j2), int(m))] = a
        off += _ALPHA.size
    M = truncation(n_trunc).M
    need = (steps + 1) * 4 * M * 8
    have = len(data) - off
    if have < need:
        raise TrajectoryFormatError("truncated", f"payload has {have} bytes, header implies {need}")
    if have > need:
        raise TrajectoryFormatError("payload", f"{have - need} trailing bytes after the last snapshot")
    states = np.frombuffer(data, dtype="<f8", offset=off).reshape(steps + 1, 4, M).astype(float)
    try:
        p = PhysParams(nu1, nu2, g, alphas)
    except ValueError:
        p = PhysParams.uncoupled(nu1, nu2, 1.0, alphas)
    times = dt * np.arange(steps + 1)
    return Trajectory(times, states, p, n_trunc, seed)


def load_trajectory(path) -> Trajectory:
    return decode_trajectory(Path(path).read_bytes())


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def stamp(cfg_hash: str, seed: int, extra: str = "") -> str:
    line = f"# bsq {__version__} config={cfg_hash} seed={seed}"
    return line + (f" {extra}" if extra else "")


def write_csv(path, columns, rows, cfg_hash: str, seed: int, note: str = "") -> Path:
    """CSV with a leading comment line stamping version, config hash and seed."""
    buf = io.StringIO()
    buf.write(stamp(cfg_hash, seed, note) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    path = Path(path)
    path.write_text(buf.getvalue())
    return path


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def read_csv(path) -> tuple[str, list[str], list[list[str]]]:
    lines = Path(path).read_text().splitlines()
    head = lines[0]
    rows = list(csv.reader(lines[1:]))
    return head, rows[0], rows[1:]
