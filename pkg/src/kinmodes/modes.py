"""Special macroscopic modes and their global conservation laws.

The attractor of the dynamics is a finite-dimensional family spanned by an
orthonormal generator set: the Maxwellian, the energy mode built on the
Hamiltonian H = (|v|^2 - d)/2 + phi - <phi>, rotation modes (A x . v) M for
A in R_phi, and, on (partially) harmonic potentials, time-periodic
directional and pulsating modes.  The coefficient tuple of the attracting
mode is read off the initial datum through the global conservation laws.

Time laws follow the transport characteristics (xdot = v, vdot = -grad phi):
on a harmonic axis with frequency p the moment pair (<h, p x_i>, <h, v_i>)
rotates clockwise at frequency p, and in the fully harmonic case the pair
(<h, p x.v>, <h, (|px|^2-|v|^2)/2>)/sqrt(d) rotates at frequency 2p.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .basis import Discretization, KineticState
from .potential import SymmetryStructure


class SymmetryUnavailableError(Exception):
    pass


class ClassificationError(Exception):
    """Requested a mode family the potential does not admit."""


@dataclass
class SpecialMode:
    """Conserved coefficients (alpha, beta, A, gamma, gamma_bar, delta, delta_bar)."""

    disc: Discretization
    alpha: float = 0.0
    beta: float = 0.0
    rotation: np.ndarray | None = None          # skew matrix in span(rotation_basis)
    gamma: dict = field(default_factory=dict)     # i -> <h0, p_i x_i>
    gamma_bar: dict = field(default_factory=dict)  # i -> <h0, v_i>
    delta: float = 0.0
    delta_bar: float = 0.0
    frozen: bool = False                          # transport disabled: static laws
    h_norm_sq: float = 0.0                        # <H^2>, by quadrature

    @property
    def frequencies(self) -> dict:
        p = self.disc.potential.frequencies
        return {i: float(p[i]) for i in self.disc.symmetry.harmonic_indices}

    @property
    def pulsation(self) -> float:
        return self.disc.symmetry.pulsation_frequency

    def as_dict(self) -> dict:
        out = {"alpha": self.alpha, "beta": self.beta,
               "delta": self.delta, "delta_bar": self.delta_bar}
        for i, v in self.gamma.items():
            out[f"gamma_{i}"] = v
        for i, v in self.gamma_bar.items():
            out[f"gamma_bar_{i}"] = v
        if self.rotation is not None:
            for a in range(self.disc.dim):
                for b in range(a + 1, self.disc.dim):
                    out[f"rotation_{a}{b}"] = float(self.rotation[a, b])
        return out


def hamiltonian_norm_sq(disc: Discretization) -> float:
    """<H^2> = d/2 + <xi_phi^2>; depends on phi, so always quadrature."""
    g = disc.grid
    xi = g.xi_phi()
    return 0.5 * disc.dim + g.integrate(xi * xi)


def _pulsating_weights(disc: Discretization):
    """Spatial weights of the two pulsating observables (unit L^2(M) norm).

    plus  ~ (p x . v)/sqrt d          -> velocity coefficients on v_j
    minus ~ (|px|^2 - |v|^2)/(2 sqrt d) -> coefficients on 1 and E
    """
    g = disc.grid
    d = disc.dim
    p = disc.symmetry.pulsation_frequency
    xv = [p * g.X[j] / math.sqrt(d) for j in range(d)]
    px2 = 0.5 * (p ** 2) * np.sum(g.X ** 2, axis=0)
    r_part = (px2 - 0.5 * d) / math.sqrt(d)
    e_part = -1.0 / math.sqrt(2.0)
    return xv, r_part, e_part


def conserved_mode(h0: KineticState, frozen: bool = False) -> SpecialMode:
    """Extract the attracting mode's coefficients from the global conservation laws."""
    disc = h0.disc
    g, sym, d = disc.grid, disc.symmetry, disc.dim
    w = g.weights
    mode = SpecialMode(disc=disc, frozen=frozen)

    mode.alpha = float(np.sum(w * h0.C[0]))
    mode.h_norm_sq = hamiltonian_norm_sq(disc)
    h_mom = math.sqrt(d / 2.0) * np.sum(w * h0.C[1 + d]) + np.sum(w * g.xi_phi() * h0.C[0])
    mode.beta = float(h_mom / mode.h_norm_sq)

    if sym.rotation_basis:
        A = np.zeros((d, d))
        for B in sym.rotation_basis:
            Bx = np.tensordot(B, g.X, axes=(1, 0))
            coef = sum(np.sum(w * Bx[j] * h0.C[1 + j]) for j in range(d))
            A = A + coef * B
        mode.rotation = A
    elif sym.rotation_complement and d > 1:
        mode.rotation = np.zeros((d, d))

    p = disc.potential.frequencies
    for i in sym.harmonic_indices:
        mode.gamma[i] = float(p[i] * np.sum(w * g.X[i] * h0.C[0]))
        mode.gamma_bar[i] = float(np.sum(w * h0.C[1 + i]))

    if sym.pulsating_allowed:
        xv, r_part, e_part = _pulsating_weights(disc)
        mode.delta = float(sum(np.sum(w * xv[j] * h0.C[1 + j]) for j in range(d)))
        mode.delta_bar = float(np.sum(w * r_part * h0.C[0]) + e_part * np.sum(w * h0.C[1 + d]))
    return mode


def evaluate_mode_planes(mode: SpecialMode, t: float) -> dict:
    """Nonzero velocity-coefficient fields of h_par(t); keys are mode slots 0..d+1."""
    disc = mode.disc
    g, d = disc.grid, disc.dim
    tt = 0.0 if mode.frozen else t
    planes = {0: np.zeros(g.shape), 1 + d: np.zeros(g.shape)}
    for j in range(d):
        planes[1 + j] = np.zeros(g.shape)

    planes[0] += mode.alpha + mode.beta * g.xi_phi()
    planes[1 + d] += mode.beta * math.sqrt(d / 2.0)

    if mode.rotation is not None and np.any(mode.rotation):
        Ax = np.tensordot(mode.rotation, g.X, axes=(1, 0))
        for j in range(d):
            planes[1 + j] += Ax[j]

    p = disc.potential.frequencies
    for i, gam in mode.gamma.items():
        gbar = mode.gamma_bar[i]
        c, s = math.cos(p[i] * tt), math.sin(p[i] * tt)
        a_x = gam * c + gbar * s       # coefficient of p_i x_i
        a_v = -gam * s + gbar * c      # coefficient of v_i
        planes[0] += a_x * p[i] * g.X[i]
        planes[1 + i] += a_v

    if mode.delta != 0.0 or mode.delta_bar != 0.0:
        if not disc.symmetry.pulsating_allowed:
            raise ClassificationError("pulsating coefficients on a non-pulsating potential")
        pp = mode.pulsation
        c, s = math.cos(2 * pp * tt), math.sin(2 * pp * tt)
        u = mode.delta * c - mode.delta_bar * s   # coefficient of (p x.v)/sqrt d
        v = mode.delta * s + mode.delta_bar * c   # coefficient of (|px|^2-|v|^2)/(2 sqrt d)
        xv, r_part, e_part = _pulsating_weights(disc)
        for j in range(d):
            planes[1 + j] += u * xv[j]
        planes[0] += v * r_part
        planes[1 + d] += v * e_part
    return planes


def evaluate_mode(mode: SpecialMode, t: float) -> KineticState:
    return mode.disc.state_from_planes(evaluate_mode_planes(mode, t), t)


def mode_distance(h: KineticState, mode: SpecialMode) -> float:
    """|h - h_par(t)| without materializing the mode state."""
    planes = evaluate_mode_planes(mode, h.t)
    w = h.disc.grid.weights
    total = 0.0
    for k in range(h.C.shape[0]):
        diff = h.C[k] - planes[k] if k in planes else h.C[k]
        total += float(np.sum(w * diff * diff))
    return math.sqrt(max(total, 0.0))


# -- generators of the orthonormal family S-hat -----------------------------------

@dataclass(frozen=True)
class ModeGenerators:
    """The orthonormal family {f_1, f_H, f_rot,j, f_dir,i+-, f_pul+-} at t = 0."""

    names: list
    states: list                     # KineticState at t = 0
    modes: list                      # SpecialMode with exactly one unit coefficient


def generators(disc: Discretization) -> ModeGenerators:
    sym, d = disc.symmetry, disc.dim
    names, states, modes_ = [], [], []

    def add(name, **coef):
        m = SpecialMode(disc=disc, h_norm_sq=hamiltonian_norm_sq(disc), **coef)
        names.append(name)
        modes_.append(m)
        states.append(evaluate_mode(m, 0.0))

    add("maxwellian", alpha=1.0)
    add("energy", beta=1.0 / math.sqrt(hamiltonian_norm_sq(disc)))
    for j, B in enumerate(sym.rotation_basis):
        add(f"rotation_{j}", rotation=B)
    for i in sym.harmonic_indices:
        add(f"dir_x_{i}", gamma={i: 1.0}, gamma_bar={i: 0.0})
        add(f"dir_v_{i}", gamma={i: 0.0}, gamma_bar={i: 1.0})
    if sym.pulsating_allowed:
        add("pul_xv", delta=1.0)
        add("pul_x2v2", delta_bar=1.0)
    return ModeGenerators(names=names, states=states, modes=modes_)


def orthonormality_gram(disc: Discretization) -> tuple:
    gen = generators(disc)
    n = len(gen.states)
    G = np.zeros((n, n))
    for a in range(n):
        for b in range(a, n):
            G[a, b] = G[b, a] = disc.inner(gen.states[a], gen.states[b])
    return gen.names, G


# -- residual checks ---------------------------------------------------------------

def _mode_macros(mode: SpecialMode, t: float):
    """Analytic (r, m, e) fields of the mode and their time derivatives."""
    disc = mode.disc
    g, d = disc.grid, disc.dim
    tt = 0.0 if mode.frozen else t
    X = g.X
    r = np.zeros(g.shape)
    dr = np.zeros(g.shape)
    m = np.zeros((d,) + g.shape)
    dm = np.zeros((d,) + g.shape)
    e = np.full(g.shape, mode.beta * math.sqrt(d / 2.0))
    de = np.zeros(g.shape)
    r += mode.alpha + mode.beta * g.xi_phi()
    if mode.rotation is not None and np.any(mode.rotation):
        m += np.tensordot(mode.rotation, X, axes=(1, 0))
    p = disc.potential.frequencies
    for i, gam in mode.gamma.items():
        gbar = mode.gamma_bar[i]
        w = 0.0 if mode.frozen else p[i]
        c, s = math.cos(w * tt), math.sin(w * tt)
        r += (gam * c + gbar * s) * p[i] * X[i]
        dr += w * (-gam * s + gbar * c) * p[i] * X[i]
        m[i] += (-gam * s + gbar * c)
        dm[i] += -w * (gam * c + gbar * s)
    if mode.delta != 0.0 or mode.delta_bar != 0.0:
        pp = mode.pulsation
        w = 0.0 if mode.frozen else 2 * pp
        c, s = math.cos(w * tt), math.sin(w * tt)
        u = mode.delta * c - mode.delta_bar * s
        du = w * (-mode.delta * s - mode.delta_bar * c)
        v = mode.delta * s + mode.delta_bar * c
        dv = w * (mode.delta * c - mode.delta_bar * s)
        xv, r_part, e_part = _pulsating_weights(disc)
        for j in range(d):
            m[j] += u * xv[j]
            dm[j] += du * xv[j]
        r += v * r_part
        dr += dv * r_part
        e += v * e_part
        de += dv * e_part
    return (r, m, e), (dr, dm, de)


def residual_mode_system(mode: SpecialMode, t: float) -> dict:
    """Discrete residuals of the macroscopic-mode system and of the kinetic system.

    Time derivatives are analytic; space derivatives are the grid stencils, so
    residuals are O(dx^order + quadtol) for genuine modes.
    """
    disc = mode.disc
    g, d = disc.grid, disc.dim
    (r, m, e), (dr, dm, de) = _mode_macros(mode, t)
    grad_phi = g.grad_phi
    c2d = math.sqrt(2.0 / d)

    div_m = sum(g.deriv(m[j], j) for j in range(d))
    res = {}
    res["mass"] = g.norm(dr - (-div_m + sum(grad_phi[j] * m[j] for j in range(d))))
    gr = g.grad(r)
    for j in range(d):
        resj = dm[j] + gr[j] - c2d * e * grad_phi[j]
        res[f"momentum_{j}"] = g.norm(resj)
    res["energy"] = g.norm(de + c2d * div_m)
    sym_res = 0.0
    for i in range(d):
        for j in range(d):
            s = 0.5 * (g.deriv(m[i], j) + g.deriv(m[j], i))
            target = -de / math.sqrt(2.0 * d) if i == j else 0.0
            sym_res += g.inner(s - target, s - target)
    res["sym_gradient"] = math.sqrt(max(sym_res, 0.0))
    res["e_constant"] = math.sqrt(sum(g.inner(g.deriv(e, j), g.deriv(e, j)) for j in range(d)))

    # kinetic residuals: C F = 0 holds exactly by construction; dt F = T F discrete
    from .evolve import transport_apply    # local import avoids a cycle

    h = evaluate_mode(mode, t)
    Th = transport_apply(h)
    dh = disc.zero_state(t)
    dh.C[0] = dr
    for j in range(d):
        dh.C[1 + j] = dm[j]
    dh.C[1 + d] = de
    dh.C -= Th.C
    res["kinetic"] = disc.norm(dh)
    res["collision"] = 0.0 if h.C[d + 2:].size == 0 else float(
        np.sqrt(np.sum(g.weights * np.sum(h.C[d + 2:] ** 2, axis=0))))
    return res


def ode_check(mode: SpecialMode, ts=None) -> float:
    """Sup over sampled t of the L^2(rho) residual of the finite-dimensional ODE

        (2 xi_phi + grad phi . x - d)/sqrt(2d) c' + xi_2/(2 sqrt(2d)) c'''
            - grad phi . b - b'' . x - grad phi . A x = 0,

    with A, b(t), c(t) reconstructed analytically from the mode coefficients.
    """
    disc = mode.disc
    g, d = disc.grid, disc.dim
    if ts is None:
        ts = np.linspace(0.0, 2 * np.pi, 17)
    X, grad_phi = g.X, g.grad_phi
    xi2, xiphi = g.xi2(), g.xi_phi()
    p = disc.potential.frequencies
    pp = disc.symmetry.pulsation_frequency if disc.symmetry.pulsating_allowed else 1.0

    worst = 0.0
    for t in ts:
        tt = 0.0 if mode.frozen else t
        b = np.zeros(d)
        bpp = np.zeros(d)
        for i, gam in mode.gamma.items():
            w = 0.0 if mode.frozen else p[i]
            gbar = mode.gamma_bar[i]
            b[i] = -gam * math.sin(w * tt) + gbar * math.cos(w * tt)
            bpp[i] = -(w ** 2) * b[i]
        # c(t) = beta sqrt(d/2) + e-part of the pulsating pair
        w2 = 0.0 if mode.frozen else 2 * pp
        v = mode.delta * math.sin(w2 * tt) + mode.delta_bar * math.cos(w2 * tt)
        dv = w2 * (mode.delta * math.cos(w2 * tt) - mode.delta_bar * math.sin(w2 * tt))
        d3v = -(w2 ** 2) * dv
        cp = -dv / math.sqrt(2.0)
        cppp = -d3v / math.sqrt(2.0)

        lhs = (2 * xiphi + np.sum(grad_phi * X, axis=0) - d) / math.sqrt(2 * d) * cp
        lhs += xi2 / (2 * math.sqrt(2 * d)) * cppp
        lhs -= sum(grad_phi[j] * b[j] for j in range(d))
        lhs -= sum(bpp[j] * X[j] for j in range(d))
        if mode.rotation is not None and np.any(mode.rotation):
            Ax = np.tensordot(mode.rotation, X, axes=(1, 0))
            lhs -= np.sum(grad_phi * Ax, axis=0)
        worst = max(worst, g.norm(lhs))
    return worst


# -- conservation-law drift along a trajectory -------------------------------------

def conserved_tuple(h: KineticState, disc: Discretization | None = None) -> dict:
    """Raw global moments against every generator observable, at the state's time."""
    disc = disc or h.disc
    g, sym, d = disc.grid, disc.symmetry, disc.dim
    w = g.weights
    out = {"mass": float(np.sum(w * h.C[0]))}
    out["energy"] = float(
        math.sqrt(d / 2.0) * np.sum(w * h.C[1 + d]) + np.sum(w * g.xi_phi() * h.C[0]))
    for j, B in enumerate(sym.rotation_basis):
        Bx = np.tensordot(B, g.X, axes=(1, 0))
        out[f"angmom_{j}"] = float(sum(np.sum(w * Bx[k] * h.C[1 + k]) for k in range(d)))
    p = disc.potential.frequencies
    for i in sym.harmonic_indices:
        out[f"dir_x_{i}"] = float(p[i] * np.sum(w * g.X[i] * h.C[0]))
        out[f"dir_v_{i}"] = float(np.sum(w * h.C[1 + i]))
    if sym.pulsating_allowed:
        xv, r_part, e_part = _pulsating_weights(disc)
        out["pul_xv"] = float(sum(np.sum(w * xv[j] * h.C[1 + j]) for j in range(d)))
        out["pul_x2v2"] = float(np.sum(w * r_part * h.C[0]) + e_part * np.sum(w * h.C[1 + d]))
    return out


def invariants_from_tuple(tup: dict, mode: SpecialMode, t: float) -> dict:
    """Back-rotate the oscillating moment pairs; every entry is conserved in time.

    The residuals against the mode coefficients are exactly the global
    conservation laws of the deviation h - h_par (mass/energy, rotational,
    directional, pulsating), so their drift certifies the construction.
    """
    disc = mode.disc
    tt = 0.0 if mode.frozen else t
    out = {
        "mass": tup["mass"] - mode.alpha,
        "energy": tup["energy"] - mode.beta * mode.h_norm_sq,
    }
    if mode.rotation is not None:
        for j, B in enumerate(disc.symmetry.rotation_basis):
            Bx_coef = 0.0
            # coefficient of the mode rotation on this basis element (M-orthonormal)
            g = disc.grid
            Bx = np.tensordot(B, g.X, axes=(1, 0))
            Ax = np.tensordot(mode.rotation, g.X, axes=(1, 0))
            Bx_coef = sum(g.integrate(Bx[k] * Ax[k]) for k in range(disc.dim))
            out[f"angmom_{j}"] = tup[f"angmom_{j}"] - Bx_coef
    p = disc.potential.frequencies
    for i in disc.symmetry.harmonic_indices:
        w = 0.0 if mode.frozen else p[i]
        c, s = math.cos(w * tt), math.sin(w * tt)
        P, Q = tup[f"dir_x_{i}"], tup[f"dir_v_{i}"]
        out[f"dir_gamma_{i}"] = (c * P - s * Q) - mode.gamma.get(i, 0.0)
        out[f"dir_gamma_bar_{i}"] = (s * P + c * Q) - mode.gamma_bar.get(i, 0.0)
    if disc.symmetry.pulsating_allowed:
        w = 0.0 if mode.frozen else 2 * mode.pulsation
        c, s = math.cos(w * tt), math.sin(w * tt)
        P, Q = tup["pul_xv"], tup["pul_x2v2"]
        out["pul_delta"] = (c * P + s * Q) - mode.delta
        out["pul_delta_bar"] = (-s * P + c * Q) - mode.delta_bar
    return out
