"""Truncated real Fourier representation of the Boussinesq phase space.

A state is a pair (omega, theta) of mean-zero functions on the torus
[-pi, pi]^2.  Each component is stored as real cosine and sine coefficients
over the canonical half lattice

    Z2+ = {(j1, j2) : j1 > 0, or j1 = 0 and j2 > 0}

restricted to max(|j1|, |j2|) <= n_trunc.  Coefficients live in an array of
shape (4, M) with rows

    0: omega cos   1: omega sin   2: theta cos   3: theta sin

so the basis direction sigma_j^m (temperature) is row 2 + m and psi_j^m
(vorticity) is row m.  Modes are ordered by j1, then j2.

Products are evaluated pseudo-spectrally on a grid with more than 3 * n_trunc
points per axis, which makes the truncated quadratic term exact (no
aliasing into retained modes).  All array kernels accept leading batch
dimensions: ``(..., 4, M)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

TWO_PI_SQ = 2.0 * math.pi**2  # L2 norm squared of cos(j.x) on the torus

OMEGA_ROWS = (0, 1)
THETA_ROWS = (2, 3)


class TruncationError(ValueError):
    """A requested mode or product falls outside the stored lattice."""


@dataclass(frozen=True, order=True)
class ModeIndex:
    j1: int
    j2: int

    def is_canonical(self) -> bool:
        return self.j1 > 0 or (self.j1 == 0 and self.j2 > 0)

    def canonical(self) -> tuple["ModeIndex", int]:
        """Fold onto Z2+; returns (mode, sign) with sign = -1 on reflection.

        cos(-j.x) = cos(j.x) and sin(-j.x) = -sin(j.x), so the sign only
        applies to sine (parity 1) coefficients.
        """
        if self.j1 == 0 and self.j2 == 0:
            raise ValueError("the zero mode is not part of the phase space")
        if self.is_canonical():
            return self, 1
        return ModeIndex(-self.j1, -self.j2), -1

    def __add__(self, other: "ModeIndex") -> "ModeIndex":
        return ModeIndex(self.j1 + other.j1, self.j2 + other.j2)

    def __sub__(self, other: "ModeIndex") -> "ModeIndex":
        return ModeIndex(self.j1 - other.j1, self.j2 - other.j2)

    def __neg__(self) -> "ModeIndex":
        return ModeIndex(-self.j1, -self.j2)

    @property
    def norm2(self) -> int:
        return self.j1 * self.j1 + self.j2 * self.j2

    @property
    def perp(self) -> "ModeIndex":
        return ModeIndex(-self.j2, self.j1)

    def dot(self, other: "ModeIndex") -> int:
        return self.j1 * other.j1 + self.j2 * other.j2

    def __str__(self) -> str:
        return f"({self.j1},{self.j2})"


def mode(j1: int, j2: int) -> ModeIndex:
    return ModeIndex(int(j1), int(j2))


E1 = ModeIndex(1, 0)
E2 = ModeIndex(0, 1)


@dataclass(frozen=True)
class BasisElement:
    """One trigonometric basis direction.

    ``kind`` is "sigma" (temperature component) or "psi" (vorticity
    component); ``parity`` 0 selects cosine and 1 selects sine.
    """

    kind: str
    index: ModeIndex
    parity: int

    def __post_init__(self):
        if self.kind not in ("sigma", "psi"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        object.__setattr__(self, "parity", int(self.parity) % 2)

    @property
    def row(self) -> int:
        return (2 if self.kind == "sigma" else 0) + self.parity

    def __str__(self) -> str:
        return f"{self.kind}{self.index}^{self.parity}"


def sigma(j: ModeIndex, m: int) -> BasisElement:
    return BasisElement("sigma", j, m)


def psi(j: ModeIndex, m: int) -> BasisElement:
    return BasisElement("psi", j, m)


DEFAULT_FORCED = (E1, E2)


def default_alphas() -> dict:
    return {(k, m): 1.0 for k in DEFAULT_FORCED for m in (0, 1)}


@dataclass(frozen=True)
class PhysParams:
    """Viscosity nu1, diffusivity nu2, buoyancy g and noise amplitudes.

    ``alphas`` maps (forced mode, parity) to the amplitude of the Brownian
    motion driving that temperature direction.  ``omega_weight`` overrides
    the norm weight nu1 * nu2 / g**2; it is only meant for the uncoupled
    comparison runs built with :meth:`uncoupled`.
    """

    nu1: float = 1.0
    nu2: float = 1.0
    g: float = 1.0
    alphas: dict = field(default_factory=default_alphas)
    omega_weight: float | None = None
    _checked: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        alphas = {}
        for (k, m), a in dict(self.alphas).items():
            if not isinstance(k, ModeIndex):
                k = ModeIndex(*k)
            alphas[(k, int(m) % 2)] = float(a)
        object.__setattr__(self, "alphas", alphas)
        if self._checked:
            problems = self.violations()
            if problems:
                raise ValueError("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if not self.nu1 > 0:
            out.append(f"nu1 must be positive (got {self.nu1})")
        if not self.nu2 > 0:
            out.append(f"nu2 must be positive (got {self.nu2})")
        if self.g == 0 and self.omega_weight is None:
            out.append("g must be nonzero: the buoyancy coupling is what spreads "
                       "the temperature noise into the vorticity")
        for (k, m), a in self.alphas.items():
            if not k.is_canonical():
                out.append(f"forced mode {k} is not in the canonical half lattice")
            if a == 0:
                out.append(f"noise amplitude for {k}, parity {m} must be nonzero")
        return out

    @classmethod
    def uncoupled(cls, nu1: float, nu2: float, omega_weight: float, alphas=None):
        """g = 0 variant for degeneracy comparisons (norm weight held fixed)."""
        return cls(nu1=nu1, nu2=nu2, g=0.0,
                   alphas=default_alphas() if alphas is None else alphas,
                   omega_weight=float(omega_weight), _checked=False)

    def with_alphas(self, alphas: dict) -> "PhysParams":
        return PhysParams(self.nu1, self.nu2, self.g, alphas, self.omega_weight,
                          _checked=False)

    @property
    def zeta(self) -> float:
        if self.omega_weight is not None:
            return self.omega_weight
        return self.nu1 * self.nu2 / self.g**2

    @property
    def kappa(self) -> float:
        return min(self.nu1, self.nu2)

    @property
    def forced(self) -> list:
        """Forced (mode, parity) pairs in a fixed order (mode, then parity)."""
        return sorted(self.alphas)

    @property
    def d(self) -> int:
        return len(self.alphas)


def _fast_len(n: int) -> int:
    while True:
        m = n
        for p in (2, 3, 5):
            while m % p == 0:
                m //= p
        if m == 1:
            return n
        n += 1


class Truncation:
    """Mode bookkeeping and FFT plumbing for one truncation level."""

    def __init__(self, n_trunc: int):
        if n_trunc < 1:
            raise ValueError("n_trunc must be at least 1")
        self.n = n = int(n_trunc)
        modes = [(a, b) for a in range(0, n + 1) for b in range(-n, n + 1)
                 if a > 0 or b > 0]
        self.modes = np.array(modes, dtype=np.int64)
        self.M = len(modes)
        self.dim = 4 * self.M
        self.k1 = self.modes[:, 0].astype(float)
        self.k2 = self.modes[:, 1].astype(float)
        self.k_sq = self.k1**2 + self.k2**2
        self.k_abs = np.sqrt(self.k_sq)
        self.lookup = {m: i for i, m in enumerate(modes)}
        self.ng = _fast_len(3 * n + 1)
        self._rows = self.modes[:, 1] % self.ng
        self._cols = self.modes[:, 0]
        axis0 = self.modes[:, 0] == 0
        self._axis_idx = np.nonzero(axis0)[0]
        self._axis_rows = (-self.modes[axis0, 1]) % self.ng
        # velocity multipliers for u_hat = i j_perp omega_hat / |j|^2
        self.q1 = -self.k2 / self.k_sq
        self.q2 = self.k1 / self.k_sq

    def index(self, j: ModeIndex) -> int:
        try:
            return self.lookup[(j.j1, j.j2)]
        except KeyError:
            raise TruncationError(f"mode {j} outside truncation n_trunc={self.n}") from None

    def contains(self, j: ModeIndex) -> bool:
        return (j.j1, j.j2) in self.lookup

    def flat_index(self, b: BasisElement) -> int:
        return b.row * self.M + self.index(b.index)

    def low_mask(self, N: float) -> np.ndarray:
        """Boolean (M,) mask of modes with Euclidean |j| <= N."""
        return self.k_sq <= N * N + 1e-9

    # real-form multiplication by i*q: (c, s) -> (q s, -q c)
    @staticmethod
    def mul_iq(c, s, q):
        return q * s, -q * c

    def to_grid(self, c: np.ndarray, s: np.ndarray) -> np.ndarray:
        """Real-space samples of sum c cos(j.x) + s sin(j.x); batch over leading dims."""
        shape = c.shape[:-1]
        spec = np.zeros(shape + (self.ng, self.ng // 2 + 1), dtype=complex)
        vals = (c - 1j * s) * (0.5 * self.ng**2)
        spec[..., self._rows, self._cols] = vals
        spec[..., self._axis_rows, 0] = np.conj(vals[..., self._axis_idx])
        return np.fft.irfft2(spec, s=(self.ng, self.ng))

    def from_grid(self, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        spec = np.fft.rfft2(f) / self.ng**2
        vals = spec[..., self._rows, self._cols]
        return 2.0 * vals.real, -2.0 * vals.imag

    def grid_points(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) meshes matching the layout of :meth:`to_grid` (axis 0 is y)."""
        x = 2 * np.pi * np.arange(self.ng) / self.ng
        y, xx = np.meshgrid(x, x, indexing="ij")
        return xx, y

    # ---- array kernels -------------------------------------------------

    def velocity(self, a: np.ndarray) -> tuple:
        """Velocity coefficients (u1c, u1s, u2c, u2s) from state array a."""
        u1c, u1s = self.mul_iq(a[..., 0, :], a[..., 1, :], self.q1)
        u2c, u2s = self.mul_iq(a[..., 0, :], a[..., 1, :], self.q2)
        return u1c, u1s, u2c, u2s

    def gradient_coeffs(self, c, s):
        dxc, dxs = self.mul_iq(c, s, self.k1)
        dyc, dys = self.mul_iq(c, s, self.k2)
        return dxc, dxs, dyc, dys

    def advect(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """B(a, b): transport of b's components by the velocity of a's vorticity."""
        a, b = np.broadcast_arrays(a, b)
        u1c, u1s, u2c, u2s = self.velocity(a)
        gw = self.gradient_coeffs(b[..., 0, :], b[..., 1, :])
        gt = self.gradient_coeffs(b[..., 2, :], b[..., 3, :])
        cs = np.stack([u1c, u2c, gw[0], gw[2], gt[0], gt[2]], axis=-2)
        ss = np.stack([u1s, u2s, gw[1], gw[3], gt[1], gt[3]], axis=-2)
        g = self.to_grid(cs, ss)
        u1, u2 = g[..., 0, :, :], g[..., 1, :, :]
        prod = np.stack([u1 * g[..., 2, :, :] + u2 * g[..., 3, :, :],
                         u1 * g[..., 4, :, :] + u2 * g[..., 5, :, :]], axis=-3)
        c, s = self.from_grid(prod)
        out = np.empty(a.shape)
        out[..., 0, :], out[..., 1, :] = c[..., 0, :], s[..., 0, :]
        out[..., 2, :], out[..., 3, :] = c[..., 1, :], s[..., 1, :]
        return out

    def dissipation(self, a: np.ndarray, p: PhysParams) -> np.ndarray:
        out = np.empty(np.shape(a))
        out[..., 0:2, :] = p.nu1 * self.k_sq * a[..., 0:2, :]
        out[..., 2:4, :] = p.nu2 * self.k_sq * a[..., 2:4, :]
        return out

    def buoyancy(self, a: np.ndarray, p: PhysParams) -> np.ndarray:
        # (g d/dx theta, 0)
        out = np.zeros(np.shape(a))
        c, s = self.mul_iq(a[..., 2, :], a[..., 3, :], p.g * self.k1)
        out[..., 0, :], out[..., 1, :] = c, s
        return out

    def buoyancy_adjoint(self, a: np.ndarray, p: PhysParams) -> np.ndarray:
        # adjoint in the weighted pairing: (0, -zeta g d/dx omega)
        out = np.zeros(np.shape(a))
        c, s = self.mul_iq(a[..., 0, :], a[..., 1, :], -p.zeta * p.g * self.k1)
        out[..., 2, :], out[..., 3, :] = c, s
        return out

    def drift(self, a: np.ndarray, p: PhysParams, nonlinear: bool = True) -> np.ndarray:
        out = -self.dissipation(a, p) + self.buoyancy(a, p)
        if nonlinear:
            out -= self.advect(a, a)
        return out

    def weights(self, p: PhysParams) -> np.ndarray:
        """(4, 1) row weights so that the weighted pairing is sum(w a b)."""
        return TWO_PI_SQ * np.array([[p.zeta], [p.zeta], [1.0], [1.0]])

    def inner(self, a, b, p: PhysParams):
        return np.sum(self.weights(p) * a * b, axis=(-2, -1))


@lru_cache(maxsize=None)
def truncation(n_trunc: int) -> Truncation:
    return Truncation(n_trunc)


@dataclass
class SpectralState:
    """Coefficients of (omega, theta); see the module docstring for the layout."""

    coeffs: np.ndarray
    n_trunc: int

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        t = truncation(self.n_trunc)
        if self.coeffs.shape != (4, t.M):
            raise ValueError(f"expected shape (4, {t.M}), got {self.coeffs.shape}")

    @classmethod
    def zeros(cls, n_trunc: int) -> "SpectralState":
        return cls(np.zeros((4, truncation(n_trunc).M)), n_trunc)

    @property
    def trunc(self) -> Truncation:
        return truncation(self.n_trunc)

    @property
    def omega(self) -> np.ndarray:
        return self.coeffs[0:2]

    @property
    def theta(self) -> np.ndarray:
        return self.coeffs[2:4]

    def copy(self) -> "SpectralState":
        return SpectralState(self.coeffs.copy(), self.n_trunc)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.coeffs)))

    def coefficient(self, b: BasisElement) -> float:
        j, sign = b.index.canonical()
        return sign ** b.parity * self.coeffs[b.row, self.trunc.index(j)]

    def _check(self, other):
        if not isinstance(other, SpectralState):
            return NotImplemented
        if other.n_trunc != self.n_trunc:
            raise ValueError("states live in different truncations")
        return other

    def __add__(self, other):
        other = self._check(other)
        return SpectralState(self.coeffs + other.coeffs, self.n_trunc)

    def __sub__(self, other):
        other = self._check(other)
        return SpectralState(self.coeffs - other.coeffs, self.n_trunc)

    def __mul__(self, c):
        return SpectralState(self.coeffs * float(c), self.n_trunc)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return SpectralState(self.coeffs / float(c), self.n_trunc)

    def __neg__(self):
        return SpectralState(-self.coeffs, self.n_trunc)


def basis_vector(b: BasisElement, n_trunc: int) -> SpectralState:
    """State with coefficient 1 on ``b`` (index folded onto Z2+ with its sign)."""
    u = SpectralState.zeros(n_trunc)
    j, sign = b.index.canonical()
    t = u.trunc
    if not t.contains(j):
        raise TruncationError(f"{b} outside truncation n_trunc={n_trunc}")
    u.coeffs[b.row, t.index(j)] = sign ** b.parity
    return u


def add_basis(u: SpectralState, b: BasisElement, c: float) -> None:
    """In place u += c * b, dropping the zero mode."""
    if b.index.j1 == 0 and b.index.j2 == 0:
        return
    j, sign = b.index.canonical()
    u.coeffs[b.row, u.trunc.index(j)] += c * sign ** b.parity


def inner_product(u: SpectralState, v: SpectralState) -> float:
    """Unweighted coefficient pairing; the basis is orthonormal for it."""
    return float(np.sum(u.coeffs * v.coeffs))


def weighted_inner(u: SpectralState, v: SpectralState, p: PhysParams) -> float:
    """L2 pairing zeta <omega, omega'> + <theta, theta'> with zeta = nu1 nu2 / g^2."""
    return float(u.trunc.inner(u.coeffs, v.coeffs, p))


def weighted_norm(u: SpectralState, p: PhysParams) -> float:
    return math.sqrt(max(weighted_inner(u, u, p), 0.0))


def sobolev_norm(u: SpectralState, p: PhysParams, s: float) -> float:
    if s < -2:
        raise ValueError("Sobolev index below -2 is not supported")
    t = u.trunc
    mult = t.k_sq ** s
    return math.sqrt(float(np.sum(t.weights(p) * mult * u.coeffs**2)))


def biot_savart(u: SpectralState) -> tuple[np.ndarray, np.ndarray]:
    """Velocity coefficients from the vorticity of ``u``.

    Returns two (2, M) arrays (cos row, sin row) for the velocity components.
    Per mode u_hat = i j_perp omega_hat / |j|^2 with j_perp = (-j2, j1); in
    this orientation d/dx u2 - d/dy u1 = -omega.
    """
    u1c, u1s, u2c, u2s = u.trunc.velocity(u.coeffs)
    return np.stack([u1c, u1s]), np.stack([u2c, u2s])


def advect_B(u: SpectralState, v: SpectralState) -> SpectralState:
    u._check(v)
    return SpectralState(u.trunc.advect(u.coeffs, v.coeffs), u.n_trunc)


def buoyancy_G(u: SpectralState, p: PhysParams) -> SpectralState:
    return SpectralState(u.trunc.buoyancy(u.coeffs, p), u.n_trunc)


def dissipation_A(u: SpectralState, p: PhysParams) -> SpectralState:
    return SpectralState(u.trunc.dissipation(u.coeffs, p), u.n_trunc)


def project(u: SpectralState, N: float, which: str = "low") -> SpectralState:
    if N > u.n_trunc:
        raise TruncationError(f"projection level {N} exceeds n_trunc={u.n_trunc}")
    mask = u.trunc.low_mask(N)
    if which == "high":
        mask = ~mask
    elif which != "low":
        raise ValueError("which must be 'low' or 'high'")
    return SpectralState(u.coeffs * mask, u.n_trunc)


def drift_F(u: SpectralState, p: PhysParams, nonlinear: bool = True) -> SpectralState:
    return SpectralState(u.trunc.drift(u.coeffs, p, nonlinear), u.n_trunc)


def random_state(n_trunc: int, rng: np.random.Generator, *, decay: float = 2.0,
                 band: int | None = None, scale: float = 1.0) -> SpectralState:
    """Smooth random state with coefficients ~ N(0, 1) * |j|^-decay."""
    t = truncation(n_trunc)
    c = rng.standard_normal((4, t.M)) * t.k_abs ** (-decay)
    if band is not None:
        c *= t.k_sq <= band * band
    return SpectralState(scale * c, n_trunc)


def embed(u: SpectralState, n_trunc: int) -> SpectralState:
    """Copy ``u`` into another truncation (dropping modes that do not fit)."""
    src, dst = u.trunc, truncation(n_trunc)
    out = SpectralState.zeros(n_trunc)
    for i, (a, b) in enumerate(src.modes):
        k = dst.lookup.get((int(a), int(b)))
        if k is not None:
            out.coeffs[:, k] = u.coeffs[:, i]
    return out
