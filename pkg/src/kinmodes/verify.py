"""Programmatic invariant suite behind `kinmodes verify`.

A fast battery of the structural checks each module owns; every entry prints
one pass/fail line.  The heavyweight acceptance runs live in the test suite.
"""

from __future__ import annotations

import math

import numpy as np

from . import basis, collision, evolve, modes, potential, spectral


def run_suite(cfg) -> list:
    results = []

    def check(name, ok, detail=""):
        results.append((name, bool(ok), detail))

    pot = potential.harmonic(1)
    sym = potential.detect_rotations(pot)
    disc = basis.make_discretization(pot, sym, nx=256, nv=8, half_width=10.0)
    g = disc.grid

    mass = g.quad_mass
    check("potential: unit mass (H3)", abs(mass - 1.0) < 1e-7, f"|int rho - 1| = {abs(mass-1):.2e}")
    xbar = g.integrate(g.X[0])
    check("potential: centred (H3)", abs(xbar) < 1e-7, f"|<x>| = {abs(xbar):.2e}")
    hbar = g.integrate(g.hess_phi[0, 0])
    check("potential: <D2 phi> = Id (H7)", abs(hbar - 1.0) < 1e-7, f"dev = {abs(hbar-1):.2e}")

    vb = disc.vbasis
    V = np.stack([vb.gh_nodes])
    B = vb.eval_functions(V)
    G = (B * vb.gh_weights) @ B.T
    err = np.max(np.abs(G - np.eye(vb.size)))
    check("basis: velocity orthonormality", err < 1e-11, f"max dev = {err:.2e}")

    w = basis.WittenOperator(disc.grid)
    one = np.ones(g.shape)
    err = g.norm(w.apply(one) - one)
    check("witten: Omega 1 = 1", err < 1e-10, f"residual = {err:.2e}")
    cp, resid, _ = spectral.poincare_constant(w)
    check("witten: harmonic Poincare constant = 1", abs(cp - 1.0) < 1e-4,
          f"c_P = {cp:.8f}")

    bgk = collision.BgkOperator(disc, rate=float(cfg["collision"]["rate"]))
    rng = np.random.default_rng(0)
    h = disc.zero_state()
    h.C[:] = rng.standard_normal(h.C.shape) * np.exp(-g.X[0] ** 2)
    r, m, e, hperp = collision.micro_projection(h)
    lhs = disc.norm(h) ** 2
    rhs = g.inner(r, r) + sum(g.inner(m[j], m[j]) for j in range(1)) \
        + g.inner(e, e) + disc.norm(hperp) ** 2
    check("collision: Pythagoras identity", abs(lhs - rhs) < 1e-12 * max(lhs, 1.0),
          f"|dev| = {abs(lhs-rhs):.2e}")
    ch = bgk.apply(h)
    diss = disc.inner(ch, h) + bgk.rate * disc.norm(hperp) ** 2
    check("collision: exact spectral gap (H1)", abs(diss) < 1e-10 * max(lhs, 1.0),
          f"|dev| = {abs(diss):.2e}")

    names, Gm = modes.orthonormality_gram(disc)
    err = np.max(np.abs(Gm - np.eye(len(names))))
    check("modes: generator orthonormality", err < 1e-7, f"max dev = {err:.2e}")

    gen = modes.generators(disc)
    kin = max(modes.residual_mode_system(md, 0.7)["kinetic"] for md in gen.modes)
    check("modes: dt F = T F on generators", kin < 1e-9, f"max residual = {kin:.2e}")

    hM = gen.states[0]
    bgkr = evolve.run(hM, bgk, evolve.IntegratorConfig(dt=2e-3, t_end=0.2, output_stride=20))
    drift = abs(bgkr.columns["norm_h"][-1] - bgkr.columns["norm_h"][0])
    check("evolve: Maxwellian is stationary", drift < 1e-12, f"norm drift = {drift:.2e}")
    return results
