"""Lie-bracket calculus for the temperature-forced system.

Closed forms for the iterated brackets of the drift with the forced
directions, the error terms attached to generated vorticity directions,
the exact-arithmetic span search, and the quadratic form built from the
approximate basis.  ``bracket_fd`` is the independent finite-difference
oracle for every closed form.

The drift is F(U) = -A U - B(U, U) + G U.  All identities here hold in the
Galerkin-truncated algebra as well, since A and G act mode by mode; exact
agreement with the untruncated trigonometric identities additionally needs
the products to fit, which ``require_headroom`` checks.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from .spectral import (E1, BasisElement, ModeIndex, PhysParams, SpectralState, TruncationError,
                       add_basis, advect_B, basis_vector, buoyancy_G, dissipation_A, drift_F,
                       mode, project, psi, sigma, truncation, weighted_inner, weighted_norm)

FD_STEP = 1e-4


@dataclass(frozen=True)
class VectorField:
    evaluator: Callable[[SpectralState], SpectralState]
    affine: bool
    descriptor: str

    def __call__(self, u: SpectralState) -> SpectralState:
        return self.evaluator(u)


def bracket_fd(E1: VectorField, E2: VectorField, U: SpectralState, h: float = FD_STEP) -> SpectralState:
    """[E1, E2](U) = DE2(U) E1(U) - DE1(U) E2(U) by central differences."""
    if not h > 0:
        raise ValueError("h must be positive")

    return directional_fd(E2, U, E1(U), h) - directional_fd(E1, U, E2(U), h)


def directional_fd(E: VectorField, U: SpectralState, V: SpectralState, h: float = FD_STEP) -> SpectralState:
    return (E(U + V * h) - E(U - V * h)) / (2 * h)


def support_radius(u: SpectralState, tol: float = 0.0) -> int:
    """Largest sup-norm wavenumber carrying a nonzero coefficient."""
    t = u.trunc
    active = np.any(np.abs(u.coeffs) > tol, axis=0)
    if not active.any():
        return 0
    return int(np.max(np.maximum(np.abs(t.k1), np.abs(t.k2))[active]))


def require_headroom(u: SpectralState, degree: int, extra: int) -> None:
    """Raise TruncationError if degree-fold products of u with |mode| <= extra overflow."""
    need = degree * support_radius(u) + extra
    if need > u.n_trunc:
        raise TruncationError(f"products reach wavenumber {need} > n_trunc={u.n_trunc}")


def _sup(j: ModeIndex) -> int:
    return max(abs(j.j1), abs(j.j2))


def _basis(b: BasisElement, n: int) -> SpectralState:
    return basis_vector(b, n)


# ---- first and second generation fields -----------------------------------

def _y_constant(j: ModeIndex, m: int, p: PhysParams, n: int) -> SpectralState:
    out = SpectralState.zeros(n)
    add_basis(out, sigma(j, m), p.nu2 * j.norm2)
    add_basis(out, psi(j, m + 1), (-1) ** m * p.g * j.j1)
    return out


def field_Y(j: ModeIndex, m: int, U: SpectralState, p: PhysParams) -> SpectralState:
    """[F, sigma_j^m](U): nu2 |j|^2 sigma + (-1)^m g j1 psi^{m+1} + B(U, sigma)."""
    s = _basis(sigma(j, m), U.n_trunc)
    return _y_constant(j, m, p, U.n_trunc) + advect_B(U, s)


def _z_linear_source(j, m, p, n):
    # -nu2 |j|^2 sigma_j^m + (-1)^{m+1} g j1 psi_j^{m+1}
    w = SpectralState.zeros(n)
    add_basis(w, sigma(j, m), -p.nu2 * j.norm2)
    add_basis(w, psi(j, m + 1), (-1) ** (m + 1) * p.g * j.j1)
    return w


def field_Z(j: ModeIndex, m: int, U: SpectralState, p: PhysParams, check: bool = True) -> SpectralState:
    """[F, Y_j^m](U) in closed form (the seven-term expansion)."""
    n = U.n_trunc
    if check:
        require_headroom(U, 2, _sup(j))
    s = _basis(sigma(j, m), n)
    ps = _basis(psi(j, m + 1), n)
    c = (-1) ** m * p.g * j.j1
    BUs = advect_B(U, s)
    out = advect_B(drift_F(U, p), s)
    out = out + s * (p.nu2**2 * j.norm2**2) + ps * (c * (p.nu1 + p.nu2) * j.norm2)
    out = out + dissipation_A(BUs, p) + advect_B(ps, U) * c
    out = out - advect_B(U, _z_linear_source(j, m, p, n))
    out = out + advect_B(U, BUs) - buoyancy_G(BUs, p)
    return out


def _grad_drift(U, V, p):
    return -dissipation_A(V, p) - advect_B(U, V) - advect_B(V, U) + buoyancy_G(V, p)


def grad_Z(j: ModeIndex, m: int, U: SpectralState, V: SpectralState, p: PhysParams) -> SpectralState:
    """Directional derivative of Z_j^m at U along V."""
    n = U.n_trunc
    s = _basis(sigma(j, m), n)
    ps = _basis(psi(j, m + 1), n)
    c = (-1) ** m * p.g * j.j1
    BVs = advect_B(V, s)
    out = advect_B(_grad_drift(U, V, p), s) + dissipation_A(BVs, p) + advect_B(ps, V) * c
    out = out - advect_B(V, _z_linear_source(j, m, p, n))
    out = out + advect_B(V, advect_B(U, s)) + advect_B(U, BVs) - buoyancy_G(BVs, p)
    return out


# ---- third generation -----------------------------------------------------

def product_psi_sigma(j: ModeIndex, m: int, k: ModeIndex, mp: int) -> dict:
    """Closed form of B(psi_j^m, sigma_k^m') as {BasisElement: coefficient}."""
    return _product_rule(j, m, k, mp, "sigma")


def product_psi_psi(j: ModeIndex, m: int, k: ModeIndex, mp: int) -> dict:
    """Closed form of B(psi_j^m, psi_k^m') as {BasisElement: coefficient}."""
    return _product_rule(j, m, k, mp, "psi")


def _product_rule(j, m, k, mp, kind):
    c = (-1) ** (1 + m * mp) / 2 * j.perp.dot(k) / j.norm2
    out: dict = {}
    if c == 0:
        return out
    for idx, coef in ((j + k, c), (j - k, c * (-1) ** (mp + 1))):
        _accumulate(out, BasisElement(kind, idx, (m + mp) % 2), coef)
    return out


def _accumulate(out: dict, b: BasisElement, coef):
    if b.index.j1 == 0 and b.index.j2 == 0:
        return
    j, sign = b.index.canonical()
    key = BasisElement(b.kind, j, b.parity)
    out[key] = out.get(key, 0) + coef * sign**b.parity
    if out[key] == 0:
        del out[key]


def combination_state(terms: dict, n_trunc: int) -> SpectralState:
    out = SpectralState.zeros(n_trunc)
    for b, c in terms.items():
        add_basis(out, b, float(c))
    return out


def sigma_coeffs(j: ModeIndex, k: ModeIndex) -> tuple[Fraction, Fraction]:
    """(a, b) = (j1/|j|^2 + k1/|k|^2, j1/|j|^2 - k1/|k|^2) as exact rationals."""
    x, y = Fraction(j.j1, j.norm2), Fraction(k.j1, k.norm2)
    return x + y, x - y


def bracket_Z_sigma(j: ModeIndex, m: int, k: ModeIndex, mp: int, g: float = 1.0) -> dict:
    """[Z_j^m, sigma_k^m'] as {sigma BasisElement: coefficient}; independent of U."""
    a, b = sigma_coeffs(j, k)
    pre = (-1) ** ((m + 1) * (mp + 1)) * Fraction(j.perp.dot(k), 2)
    out: dict = {}
    if pre == 0:
        return out
    par = (m + mp + 1) % 2
    _accumulate(out, sigma(j - k, par), g * float(pre * (-1) ** mp * b))
    _accumulate(out, sigma(j + k, par), -g * float(pre * a))
    return out


def bracket_Z_sigma_state(j, m, k, mp, p: PhysParams, n_trunc: int) -> SpectralState:
    return combination_state(bracket_Z_sigma(j, m, k, mp, p.g), n_trunc)


@dataclass(frozen=True)
class SigmaRecipe:
    target: BasisElement
    prefactor: Fraction  # in units of g
    terms: tuple  # ((sign, m, m'), ...) meaning sum sign * [Z_j^m, sigma_k^m']


def generate_sigma(j: ModeIndex, k: ModeIndex) -> dict:
    """Recipes producing sigma_{j+k}^{0,1}, sigma_{j-k}^{0,1} from [Z_j, sigma_k].

    Returns {"recipes": [...], "unreachable": [...]}; a target is unreachable
    through this pair when its exact prefactor g (j_perp . k) a (or b) vanishes.
    """
    a, b = sigma_coeffs(j, k)
    cross = j.perp.dot(k)
    table = [
        (j + k, 0, cross * a, ((-1, 0, 1), (-1, 1, 0))),
        (j + k, 1, cross * a, ((1, 0, 0), (-1, 1, 1))),
        (j - k, 0, cross * b, ((1, 1, 0), (-1, 0, 1))),
        (j - k, 1, cross * b, ((-1, 1, 1), (-1, 0, 0))),
    ]
    recipes, unreachable = [], []
    for idx, par, pre, terms in table:
        target = sigma(idx, par)
        if pre == 0 or (idx.j1 == 0 and idx.j2 == 0):
            unreachable.append(target)
        else:
            recipes.append(SigmaRecipe(target, Fraction(pre), terms))
    return {"recipes": recipes, "unreachable": unreachable}


def assemble_recipe(j: ModeIndex, k: ModeIndex, recipe: SigmaRecipe, p: PhysParams, n_trunc: int,
                    bracket=None) -> SpectralState:
    """Evaluate a recipe; ``bracket(m, m')`` defaults to the closed form."""
    if bracket is None:
        def bracket(m, mp):
            return bracket_Z_sigma_state(j, m, k, mp, p, n_trunc)
    out = SpectralState.zeros(n_trunc)
    for sign, m, mp in recipe.terms:
        out = out + bracket(m, mp) * sign
    return out


def bracket_Z_Y(j: ModeIndex, m: int, k: ModeIndex, mp: int, U: SpectralState, p: PhysParams,
                check: bool = True) -> dict:
    """[Z_j^m(U), Y_k^m'(U)] with its explicit vorticity part and remainder.

    Returns {"total", "explicit", "remainder"}.  The explicit part is the
    psi-psi advection pair plus the buoyancy of B(psi_k^{m'+1}, sigma_j^m);
    the remainder is total minus explicit and is affine, temperature-only.
    """
    n = U.n_trunc
    if check:
        require_headroom(U, 2, _sup(j) + _sup(k))
    Z = field_Z(j, m, U, p, check=False)
    Y = field_Y(k, mp, U, p)
    total = advect_B(Z, _basis(sigma(k, mp), n)) - grad_Z(j, m, U, Y, p)
    explicit = explicit_Z_Y(j, m, k, mp, p, n)
    return {"total": total, "explicit": explicit, "remainder": total - explicit}


def explicit_Z_Y(j, m, k, mp, p: PhysParams, n_trunc: int) -> SpectralState:
    pj, pk = _basis(psi(j, m + 1), n_trunc), _basis(psi(k, mp + 1), n_trunc)
    c = (-1) ** (m + mp + 1) * p.g**2 * j.j1 * k.j1
    out = (advect_B(pj, pk) + advect_B(pk, pj)) * c
    gb = buoyancy_G(advect_B(pk, _basis(sigma(j, m), n_trunc)), p)
    return out + gb * ((-1) ** mp * p.g * k.j1)


def axis_bracket_coeffs(l2: int, m: int, mp: int, g: float = 1.0) -> dict:
    """Vorticity part of [Z_{(1,l2)}^m, Y_{e1}^m'] from the reduced expansion."""
    lp = mode(1, l2)
    base = (-1) ** (m * mp + 1) * g**2 * l2 / 2
    out: dict = {}
    par = (m + mp) % 2
    _accumulate(out, psi(lp + E1, par), base * (2 + 3 * l2 * l2) / (1 + l2 * l2))
    _accumulate(out, psi(lp - E1, par), base * (-1) ** mp * l2 * l2 / (1 + l2 * l2))
    return out


# ---- generated vorticity directions and their error terms ----------------

AXIS_RECIPES = {
    # psi_{(0,l2)}^m: sum of sign * [Z_{(1,l2)}^a, Y_{e1}^b]
    0: ((-1, 0, 0), (-1, 1, 1)),
    1: ((1, 0, 1), (-1, 1, 0)),
}


def axis_scale(j: ModeIndex, g: float) -> float:
    return (1 + j.norm2) / (g * g * j.norm2**1.5)


def psi_with_error(j: ModeIndex, m: int, U: SpectralState, p: PhysParams, check: bool = True) -> SpectralState:
    """psi_j^m + J_{j,m}(U), assembled from generated brackets.

    For j1 != 0 this is a multiple of Y_j^{m+1}; on the j2 axis it is the
    combination of [Z_{j+e1}, Y_{e1}] brackets that cancels psi_{j+2e1}.
    """
    if j.j1 != 0:
        return field_Y(j, m + 1, U, p) * ((-1) ** (m + 1) / (p.g * j.j1))
    out = SpectralState.zeros(U.n_trunc)
    for sign, a, b in AXIS_RECIPES[m % 2]:
        out = out + bracket_Z_Y(j + E1, a, E1, b, U, p, check)["total"] * sign
    return out * axis_scale(j, p.g)


def junk(j: ModeIndex, m: int, U: SpectralState, p: PhysParams, check: bool = True) -> SpectralState:
    """Error term J_{j,m}(U) = (psi_j^m + J_{j,m}(U)) - psi_j^m."""
    out = psi_with_error(j, m, U, p, check)
    add_basis(out, psi(j, m), -1.0)
    return out


def junk_tail(j: ModeIndex, m: int, U: SpectralState, N_tilde: float, p: PhysParams,
              check: bool = True) -> tuple[SpectralState, float]:
    """High-mode part Q_{N~} J_{j,m}(U) and its weighted norm."""
    tail = project(junk(j, m, U, p, check), N_tilde, "high")
    return tail, weighted_norm(tail, p)


# ---- span search ---------------------------------------------------------

def target_set(N: int) -> set:
    """Canonical wavevectors with |j1| + |j2| <= N + 1, minus the four axis extremes."""
    out = set()
    for j1 in range(0, N + 2):
        for j2 in range(-(N + 1), N + 2):
            if abs(j1) + abs(j2) > N + 1:
                continue
            j = mode(j1, j2) if (j1, j2) != (0, 0) else None
            if j is None or not j.is_canonical():
                continue
            out.add(j)
    for e in ((0, N + 1), (0, N), (N + 1, 0), (N, 0)):
        out.discard(mode(*e))
    return out


@dataclass
class SpanLedger:
    sigma: dict = field(default_factory=dict)  # ModeIndex -> depth
    psi: dict = field(default_factory=dict)
    recipes: dict = field(default_factory=dict)  # (kind, ModeIndex) -> description
    certificates: dict = field(default_factory=dict)  # ModeIndex -> (parent, forced, Fraction)
    depth: int = 0
    targets: set = field(default_factory=set)

    @property
    def uncovered(self) -> set:
        return {j for j in self.targets if j not in self.sigma or j not in self.psi}

    @property
    def covered(self) -> bool:
        return not self.uncovered

    def report(self) -> str:
        lines = [f"depth {self.depth}", f"covered {self.covered}"]
        for kind, store in (("sigma", self.sigma), ("psi", self.psi)):
            for j in sorted(store, key=lambda x: (x.j1, x.j2)):
                lines.append(f"{kind} {j} depth={store[j]} via {self.recipes.get((kind, j), 'forced')}")
        for j in sorted(self.uncovered, key=lambda x: (x.j1, x.j2)):
            lines.append(f"uncovered {j}")
        return "\n".join(lines)


def generate_span(forced, N: int, depth_cap: int = 50, radius: int | None = None) -> SpanLedger:
    """Breadth-first closure of the admissible moves until I_N is covered.

    Moves: sigma_{j +- k} from a generated sigma_j and forced sigma_k when the
    exact prefactor (j_perp . k) a (resp. b) is nonzero; psi_j from sigma_j
    when j1 != 0; psi_{(0,l2)} from sigma_{(1,l2)} and sigma_{e1}.  All
    prefactors are exact rationals, so a recorded move is a certificate.
    """
    forced = sorted({mode(*f) if not isinstance(f, ModeIndex) else f for f in forced},
                    key=lambda x: (x.j1, x.j2))
    targets = target_set(N)
    if radius is None:
        radius = 2 * (N + 1) + max([_sup(k) for k in forced] + [0])
    led = SpanLedger(targets=targets)
    for k in forced:
        led.sigma[k] = 0
    frontier = deque(forced)
    depth = 0

    def add_psi(j, d, how):
        if j not in led.psi:
            led.psi[j] = d
            led.recipes[("psi", j)] = how

    while frontier and depth < depth_cap and not led.covered:
        depth += 1
        new = []
        for j in list(led.sigma):
            if j.j1 != 0:
                add_psi(j, depth, "Y rescaled")
            elif mode(1, j.j2) in led.sigma and E1 in led.sigma:
                add_psi(j, depth, f"[Z_{mode(1, j.j2)}, Y_{E1}]")
        for j in frontier:
            for k in forced:
                cross = j.perp.dot(k)
                if cross == 0:
                    continue
                a, b = sigma_coeffs(j, k)
                for idx, pre in ((j + k, a), (j - k, b)):
                    if pre == 0 or (idx.j1 == 0 and idx.j2 == 0):
                        continue
                    c, _ = idx.canonical()
                    if _sup(c) > radius or c in led.sigma:
                        continue
                    led.sigma[c] = depth
                    led.recipes[("sigma", c)] = f"[Z_{j}, sigma_{k}] prefactor g*{cross * pre}"
                    led.certificates[c] = (j, k, cross * pre)
                    new.append(c)
        frontier = deque(new)
        led.depth = depth
    # final psi sweep for sigma generated in the last layer
    for j in list(led.sigma):
        if j.j1 != 0:
            add_psi(j, depth + 1, "Y rescaled")
        elif mode(1, j.j2) in led.sigma and E1 in led.sigma:
            add_psi(j, depth + 1, f"[Z_{mode(1, j.j2)}, Y_{E1}]")
    return led


# ---- quadratic form ------------------------------------------------------

def _unit(u: SpectralState, p: PhysParams) -> SpectralState:
    nrm = weighted_norm(u, p)
    return u / nrm if nrm > 0 else u


def low_wavevectors(N: float, n_trunc: int) -> list:
    t = truncation(n_trunc)
    return [ModeIndex(int(a), int(b)) for a, b in t.modes if a * a + b * b <= N * N + 1e-9]


def approximate_basis(N: float, N_tilde: float, U: SpectralState, p: PhysParams,
                      check: bool = True) -> list:
    """[(label, state)] for the unit directions sigma_j^m and psi_j^m + Q_{N~} J_{j,m}(U).

    Directions are normalized by the weighted norm of the underlying basis
    element, so every summand of the quadratic form is a pairing with a
    unit vector plus its controlled tail.
    """
    out = []
    for j in low_wavevectors(N, U.n_trunc):
        for m in (0, 1):
            s = basis_vector(sigma(j, m), U.n_trunc)
            out.append((f"sigma{j}^{m}", _unit(s, p)))
            ps = basis_vector(psi(j, m), U.n_trunc)
            tail, _ = junk_tail(j, m, U, N_tilde, p, check)
            scale = weighted_norm(ps, p)
            out.append((f"psi{j}^{m}", (ps + tail) / scale))
    return out


def quad_form_Q(N: float, N_tilde: float, U: SpectralState, phi: SpectralState, p: PhysParams,
                basis: list | None = None) -> float:
    """Sum over the approximate basis of <phi, b(U)>^2."""
    if not N < N_tilde:
        raise ValueError("need N < N_tilde")
    if basis is None:
        basis = approximate_basis(N, N_tilde, U, p)
    return float(sum(weighted_inner(phi, b, p) ** 2 for _, b in basis))


def tail_budget(N: float, N_tilde: float, U: SpectralState, p: PhysParams, check: bool = True) -> float:
    """Sum over |j| <= N, m of |Q_{N~} J_{j,m}(U)|^2 in the same normalization as quad_form_Q."""
    total = 0.0
    for j in low_wavevectors(N, U.n_trunc):
        for m in (0, 1):
            _, nrm = junk_tail(j, m, U, N_tilde, p, check)
            scale = weighted_norm(basis_vector(psi(j, m), U.n_trunc), p)
            total += (nrm / scale) ** 2
    return total


# ---- cascade along a trajectory ------------------------------------------

def chain_field(name: str, p: PhysParams, n_trunc: int, j: ModeIndex, m: int,
                k: ModeIndex | None = None, mp: int = 0) -> VectorField:
    """VectorField for one chain element: sigma, Y, Z, Zsigma or ZY."""
    if name == "sigma":
        const = basis_vector(sigma(j, m), n_trunc)
        return VectorField(lambda U: const.copy(), True, f"sigma[{j},{m}]")
    if name == "Y":
        return VectorField(lambda U: field_Y(j, m, U, p), True, f"Y[{j},{m}]")
    if name == "Z":
        return VectorField(lambda U: field_Z(j, m, U, p, check=False), False, f"Z[{j},{m}]")
    if name == "Zsigma":
        const = bracket_Z_sigma_state(j, m, k, mp, p, n_trunc)
        return VectorField(lambda U: const.copy(), True, f"[Z[{j},{m}],sigma[{k},{mp}]]")
    if name == "ZY":
        return VectorField(lambda U: bracket_Z_Y(j, m, k, mp, U, p, check=False)["total"], False,
                           f"[Z[{j},{m}],Y[{k},{mp}]]")
    raise ValueError(f"unknown chain element {name!r}")


def drift_field(p: PhysParams) -> VectorField:
    return VectorField(lambda U: drift_F(U, p), False, "F")


def constant_field(u: SpectralState, descriptor: str = "const") -> VectorField:
    return VectorField(lambda U: u.copy(), True, descriptor)


def cascade_probe(traj, phi: SpectralState, chain: list, h: float = FD_STEP) -> dict:
    """Pairings g(t) = <K_{t,T} phi, E(Ubar(t))> on the second half of the horizon.

    Ubar = U - sigma W is the noise-shifted state, which is differentiable in
    time.  ``chain`` is a list of VectorField.  Alongside each series the
    report holds its time derivative by central differences and the
    predicted derivative <K_{t,T} phi, DE(Ubar) F(U) - DF(U) E(Ubar)>.
    """
    from .dynamics import noise_state
    from .variational import LinearizedFlow

    p, n = traj.params, traj.n_trunc
    i1 = traj.steps
    i0 = i1 // 2
    adj = LinearizedFlow(traj).backward(i0, i1, phi.coeffs, keep=True)
    shift = np.zeros_like(traj.states)
    if traj.path is not None:
        shift = noise_state(truncation(n), p, traj.path.cumulative()[: i1 + 1])
    F = drift_field(p)
    out = {"times": traj.times[i0:i1 + 1], "series": {}}
    for E in chain:
        vals, pred = [], []
        for c, i in enumerate(range(i0, i1 + 1)):
            U = traj.state(i)
            Ub = SpectralState(traj.states[i] - shift[i], n)
            k = SpectralState(adj[c], n)
            e = E(Ub)
            vals.append(weighted_inner(k, e, p))
            rate = directional_fd(E, Ub, F(U), h) - directional_fd(F, U, e, h)
            pred.append(weighted_inner(k, rate, p))
        vals, pred = np.array(vals), np.array(pred)
        deriv = np.gradient(vals, traj.dt) if len(vals) > 1 else np.zeros_like(vals)
        out["series"][E.descriptor] = {
            "values": vals,
            "derivative": deriv,
            "predicted": pred,
            "sup": float(np.max(np.abs(vals))) if len(vals) else 0.0,
        }
    return out


# ---- finite-difference verification matrix --------------------------------

def canonical_modes(radius: float) -> list:
    """Canonical wavevectors with Euclidean norm <= radius."""
    r = int(math.floor(radius))
    return [mode(a, b) for a in range(0, r + 1) for b in range(-r, r + 1)
            if (a > 0 or b > 0) and a * a + b * b <= radius * radius + 1e-9]


def _fd_two(E1: VectorField, E2: VectorField, U: SpectralState, h: float) -> tuple:
    """bracket_fd at h and h/2, sharing the field values at U."""
    v1, v2 = E1(U), E2(U)
    return tuple(directional_fd(E2, U, v1, s) - directional_fd(E1, U, v2, s) for s in (h, h / 2))


def _fd_pair(E1: VectorField, E2: VectorField, U: SpectralState, closed: SpectralState, h: float) -> dict:
    a, b = _fd_two(E1, E2, U, h)
    return _row_stats(a - closed, b - closed, closed)


def _row_stats(e1: SpectralState, e2: SpectralState, closed: SpectralState) -> dict:
    a, b = float(np.abs(e1.coeffs).max()), float(np.abs(e2.coeffs).max())
    scale = max(float(np.abs(closed.coeffs).max()), 1.0)
    return {"err_h": a, "err_h2": b, "ratio": a / b if b > 0 else math.inf, "scale": scale,
            "rel_err": max(a, b) / scale}


def verification_matrix(p: PhysParams, radius: float, states: list, h: float = 1e-3,
                        pair_radius: float | None = None) -> list[dict]:
    """Closed forms against central-difference brackets at h and h/2.

    Rows cover Y_j^m, Z_j^m, [Z_j^m, sigma_k^m'], [Z_j^m, Y_k^m'] and
    psi_j^m + J_{j,m} for all canonical |j|, |k| <= radius.  Each row holds
    the two discrepancies, their ratio and the discrepancy relative to the
    size of the closed form.  The [Z, sigma] rows also record how far the
    finite-difference bracket moves between the first state and the others
    (``u_spread``), which measures its U-independence.
    """
    modes = canonical_modes(radius)
    pairs = canonical_modes(radius if pair_radius is None else pair_radius)
    F = drift_field(p)
    rows = []

    def add(kind, j, m, k, mp, s, stats, **extra):
        rows.append({"field": kind, "j": str(j), "m": m, "k": "" if k is None else str(k),
                     "mp": "" if mp is None else mp, "state": s, **stats, **extra})

    for j in modes:
        for m in (0, 1):
            sj = basis_vector(sigma(j, m), states[0].n_trunc)
            Yj = VectorField(lambda V, j=j, m=m: field_Y(j, m, V, p), True, f"Y[{j},{m}]")
            Zj = VectorField(lambda V, j=j, m=m: field_Z(j, m, V, p, check=False), False, f"Z[{j},{m}]")
            for s, U in enumerate(states):
                add("Y", j, m, None, None, s, _fd_pair(F, constant_field(sj), U, field_Y(j, m, U, p), h))
                add("Z", j, m, None, None, s, _fd_pair(F, Yj, U, field_Z(j, m, U, p), h))
                add("psiJ", j, m, None, None, s, _psi_fd(j, m, U, p, h))
            for k in pairs:
                for mp in (0, 1):
                    sk = constant_field(basis_vector(sigma(k, mp), U.n_trunc))
                    Yk = VectorField(lambda V, k=k, mp=mp: field_Y(k, mp, V, p), True, f"Y[{k},{mp}]")
                    zs = bracket_Z_sigma_state(j, m, k, mp, p, U.n_trunc)
                    first = None
                    for s, U in enumerate(states):
                        a, b = _fd_two(Zj, sk, U, h)
                        first = a if first is None else first
                        spread = float(np.abs((a - first).coeffs).max())
                        add("Zsigma", j, m, k, mp, s, _row_stats(a - zs, b - zs, zs), u_spread=spread)
                        zy = bracket_Z_Y(j, m, k, mp, U, p, check=False)["total"]
                        add("ZY", j, m, k, mp, s, _fd_pair(Zj, Yk, U, zy, h))
    return rows


def _psi_fd(j: ModeIndex, m: int, U: SpectralState, p: PhysParams, h: float) -> dict:
    """psi_j^m + J_{j,m}(U) rebuilt from finite-difference brackets."""
    closed = psi_with_error(j, m, U, p, check=False)
    F = drift_field(p)

    def build(step):
        if j.j1 != 0:
            s = constant_field(basis_vector(sigma(j, m + 1), U.n_trunc))
            return bracket_fd(F, s, U, step) * ((-1) ** (m + 1) / (p.g * j.j1))
        out = SpectralState.zeros(U.n_trunc)
        lp = j + E1
        for sign, a, b in AXIS_RECIPES[m % 2]:
            Z = VectorField(lambda V, a=a: field_Z(lp, a, V, p, check=False), False, "Z")
            Y = VectorField(lambda V, b=b: field_Y(E1, b, V, p), True, "Y")
            out = out + bracket_fd(Z, Y, U, step) * sign
        return out * axis_scale(j, p.g)

    return _row_stats(build(h) - closed, build(h / 2) - closed, closed)
