"""Deviation fields and Lyapunov functionals evaluated along trajectories.

The functionals reproduce the hypocoercivity bookkeeping: a base functional
built from the microscopic part and the inhomogeneous deviations (F1/D1), and
its extension by the finite-dimensional quantities A(t), b(t), c(t) (F2/D2).
Time derivatives of recorded series come from sliding local polynomial fits,
which keeps the diagnostics decoupled from the integrator internals at the
cost of a stencil error reported alongside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .basis import WittenOperator
from .collision import macro_norms
from .evolve import Trajectory, heat_moment, stress_moment
from .modes import conserved_tuple, invariants_from_tuple


class InsufficientHistoryError(Exception):
    pass


def _window_derivatives(series: np.ndarray, dt: float, max_order: int = 3,
                        width: int = 7) -> list:
    """Sliding polynomial-fit derivatives of a sampled series.

    Fits a degree-(width-1) interpolating polynomial on the ``width`` nearest
    samples of each record, giving centered high-order stencils in the
    interior and one-sided ones at the edges.
    """
    n = series.shape[0]
    if n < 5:
        raise InsufficientHistoryError(f"need at least 5 records, got {n}")
    width = min(width, n)
    flat = series.reshape(n, -1)
    outs = [np.zeros_like(flat) for _ in range(max_order)]
    half = width // 2
    for i in range(n):
        lo = min(max(i - half, 0), n - width)
        ts = (np.arange(lo, lo + width) - i) * dt
        V = np.vander(ts, width, increasing=True)
        coef = np.linalg.solve(V, flat[lo:lo + width])
        fact = 1.0
        for k in range(1, max_order + 1):
            fact *= k
            if k < width:
                outs[k - 1][i] = coef[k] * fact
    return [o.reshape(series.shape) for o in outs]


@dataclass
class DeviationFields:
    """Per-record deviation fields and global scalars (arrays over records)."""

    r_s: np.ndarray
    m_s: np.ndarray
    e_s: np.ndarray
    w: np.ndarray
    w_s: np.ndarray
    z: np.ndarray
    dt_w_s: np.ndarray
    A: np.ndarray           # (n, d, d) skew averages
    b: np.ndarray           # (n, d)
    c: np.ndarray           # (n,)
    b1: np.ndarray
    b2: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    c3: np.ndarray


def deviations(traj: Trajectory) -> DeviationFields:
    """All deviation quantities along a trajectory with stored field history."""
    if traj.states is None:
        raise InsufficientHistoryError("trajectory was run without field storage")
    n = len(traj.states)
    if n < 5:
        raise InsufficientHistoryError("need at least 5 trailing states")
    disc = traj.disc
    g, d = disc.grid, disc.dim
    xi2, xiphi, phis = g.xi2(), g.xi_phi(), g.phi_s()
    X = g.X
    c2d = math.sqrt(2.0 / d)

    r = np.array([S[0] for S in traj.states])
    m = np.array([S[1:1 + d] for S in traj.states])
    e = np.array([S[1 + d] for S in traj.states])

    b = np.array([[g.integrate(m[k][j]) for j in range(d)] for k in range(n)])
    c = np.array([g.integrate(e[k]) for k in range(n)])
    A = np.zeros((n, d, d))
    div_m = np.zeros((n,) + g.shape)
    for k in range(n):
        for i in range(d):
            for j in range(d):
                if i != j:
                    A[k, i, j] = 0.5 * (g.integrate(g.deriv(m[k, i], j))
                                        - g.integrate(g.deriv(m[k, j], i)))
        div_m[k] = sum(g.deriv(m[k, j], j) for j in range(d))

    r_s = np.empty_like(r)
    m_s = np.empty_like(m)
    w = np.empty_like(r)
    w_s = np.empty_like(r)
    for k in range(n):
        grad_r_avg = np.array([g.integrate(g.deriv(r[k], j)) for j in range(d)])
        lap_r_avg = g.integrate(g.laplacian(r[k]))
        r_s[k] = (r[k] - np.tensordot(grad_r_avg, X, axes=(0, 0))
                  - lap_r_avg / (2 * d) * xi2)
        mean_div = g.integrate(div_m[k])
        m_s[k] = (m[k] - np.tensordot(A[k], X, axes=(1, 0))
                  - (mean_div / d) * X
                  - b[k].reshape((d,) + (1,) * d))
        w[k] = r[k] - c2d * c[k] * g.phi
        w_s[k] = r_s[k] - c2d * c[k] * phis
    e_s = e - c.reshape((n,) + (1,) * d)

    b1, b2, _ = _window_derivatives(b, traj.out_dt)
    c1, c2, c3 = _window_derivatives(c, traj.out_dt)
    (dt_w_s,) = _window_derivatives(w_s, traj.out_dt, max_order=1, width=5)

    z = np.empty_like(r)
    for k in range(n):
        z[k] = (r[k] + np.tensordot(b1[k], X, axes=(0, 0))
                - c2[k] * xi2 / (2 * math.sqrt(2 * d))
                - c[k] * c2d * xiphi)
    return DeviationFields(r_s=r_s, m_s=m_s, e_s=e_s, w=w, w_s=w_s, z=z,
                           dt_w_s=dt_w_s, A=A, b=b, c=c, b1=b1, b2=b2,
                           c1=c1, c2=c2, c3=c3)


def default_epsilons(eps: float = 1e-2) -> dict:
    """The coupling-weight ladder eps_1..eps_6 of the Lyapunov functionals."""
    return {
        "eps1": eps,
        "eps2": eps ** 1.5,
        "eps3": eps ** 1.75,
        "eps4": eps ** (15 / 8),
        "eps5": eps ** (61 / 32),
        "eps6": eps ** (62 / 32),
    }


@dataclass
class LyapunovRecord:
    F1: np.ndarray
    F2: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    equivalence_ratio: np.ndarray     # F2 / |h|^2
    epsilons: dict


def lyapunov(traj: Trajectory, witten: WittenOperator, eps: float = 1e-2,
             dev: DeviationFields | None = None) -> LyapunovRecord:
    """Evaluate F1, D1, F2, D2 along a trajectory with stored fields (d = 1 or
    a discretization small enough to carry the Witten eigenbasis)."""
    disc = traj.disc
    g, d = disc.grid, disc.dim
    if dev is None:
        dev = deviations(traj)
    epss = default_epsilons(eps)
    n = len(traj.states)
    X, xi2, xiphi = g.X, g.xi2(), g.xi_phi()
    c2d = math.sqrt(2.0 / d)
    s2d = math.sqrt(2.0 * d)

    phi_x_avg = np.array([g.integrate(g.phi * X[j]) for j in range(d)])
    x2x_avg = np.array([g.integrate(np.sum(X ** 2, axis=0) * X[j]) for j in range(d)])
    xx_avg = np.array([[g.integrate(X[i] * X[j]) for j in range(d)] for i in range(d)])

    F1 = np.zeros(n)
    F2 = np.zeros(n)
    D1 = np.zeros(n)
    D2 = np.zeros(n)
    ratio = np.zeros(n)
    from .basis import KineticState

    for k in range(n):
        h = KineticState(traj.states[k], disc, traj.times[k])
        nr, nm, ne, nperp = macro_norms(h)
        norm2 = nr ** 2 + nm ** 2 + ne ** 2 + nperp ** 2
        e_field = h.C[1 + d]
        Theta = heat_moment(h)
        E = stress_moment(h)

        grad_e = g.grad(e_field)
        term1 = sum(g.inner(witten.solve(grad_e[j]), Theta[j]) for j in range(d))

        c_k = dev.c[k]
        term2 = 0.0
        for i in range(d):
            for j in range(d):
                s = 0.5 * (g.deriv(dev.m_s[k, i], j) + g.deriv(dev.m_s[k, j], i))
                tgt = E[i, j] - (c2d * c_k if i == j else 0.0)
                term2 += g.inner(witten.solve(s), tgt)

        grad_ws = g.grad(dev.w_s[k])
        term3 = sum(g.inner(witten.solve(grad_ws[j]), dev.m_s[k, j]) for j in range(d))
        term4 = -g.inner(witten.solve(dev.dt_w_s[k]), dev.w_s[k])

        F1[k] = (norm2 + epss["eps1"] * term1 + epss["eps2"] * term2
                 + epss["eps3"] * term3 + epss["eps4"] * term4)

        ws_norm2 = g.inner(dev.w_s[k], dev.w_s[k])
        es_norm2 = g.inner(dev.e_s[k], dev.e_s[k])
        ms_norm2 = sum(g.inner(dev.m_s[k, j], dev.m_s[k, j]) for j in range(d))
        om_dtws = g.inner(witten.inv_sqrt(dev.dt_w_s[k]), dev.dt_w_s[k])
        D1[k] = nperp ** 2 + es_norm2 + ms_norm2 + ws_norm2 + max(om_dtws, 0.0)

        # finite-dimensional extension
        Ak, bk, b1k, c1k, c2k = dev.A[k], dev.b[k], dev.b1[k], dev.c1[k], dev.c2[k]
        Xfield = ((2 * xiphi + np.sum(g.grad_phi * X, axis=0) - d) / s2d * c_k
                  + xi2 / (2 * s2d) * c2k
                  - np.tensordot(b1k, X, axes=(0, 0)))
        Yvec = c2d * phi_x_avg * c_k + x2x_avg / (2 * s2d) * c2k - xx_avg @ b1k
        Ax = np.tensordot(Ak, X, axes=(1, 0))
        gAx = np.sum(g.grad_phi * Ax, axis=0)
        cross = g.inner(Xfield - np.tensordot(Yvec, g.grad_phi, axes=(0, 0)), gAx)
        F2[k] = (F1[k] - epss["eps5"] * cross
                 - epss["eps6"] * float(bk @ b1k)
                 - epss["eps6"] * float(c1k * c2k))

        A_norm2 = g.integrate(np.sum(Ax ** 2, axis=0))
        D2[k] = D1[k] + A_norm2 + float(b1k @ b1k) + float(c1k ** 2) + float(c2k ** 2)
        ratio[k] = F2[k] / norm2 if norm2 > 0 else 1.0
    return LyapunovRecord(F1=F1, F2=F2, D1=D1, D2=D2, equivalence_ratio=ratio,
                          epsilons=epss)


def attach_lyapunov(traj: Trajectory, witten: WittenOperator, eps: float = 1e-2) -> LyapunovRecord:
    rec = lyapunov(traj, witten, eps)
    traj.columns["F1"] = rec.F1
    traj.columns["F2"] = rec.F2
    traj.columns["D1"] = rec.D1
    traj.columns["D2"] = rec.D2
    return rec


def htheorem_check(traj: Trajectory, rate: float, budget_rate: float | None = None) -> dict:
    """Verify d/dt |h|^2 <= -2 rate |h_perp|^2 between consecutive outputs.

    The collision factor of the Strang scheme dissipates exactly; the budget
    absorbs the transport stencil defect and the RK4 error.
    """
    g = traj.disc.grid
    if budget_rate is None:
        # trapezoid allowance for the dissipation integral between outputs,
        # plus the RK4 and stencil-defect floors
        budget_rate = (rate * traj.out_dt ** 2
                       + 100.0 * float(np.max(g.dx)) ** g.fd_order
                       + 100.0 * traj.dt ** 4 + 1e-12)
    t = traj.times
    nh = traj.columns["norm_h"]
    np_ = traj.columns["norm_hperp"]
    worst = -np.inf
    worst_t = t[0]
    for k in range(len(t) - 1):
        dtk = t[k + 1] - t[k]
        lhs = nh[k + 1] ** 2 - nh[k] ** 2
        rhs = -rate * (np_[k] ** 2 + np_[k + 1] ** 2) * dtk
        budget = budget_rate * dtk * nh[k] ** 2
        violation = lhs - rhs - budget
        if violation > worst:
            worst, worst_t = violation, t[k + 1]
    return {
        "max_violation": float(worst),
        "at_time": float(worst_t),
        "budget_rate": float(budget_rate),
        "passed": bool(worst <= 0.0),
    }


def conservation_drift(traj: Trajectory) -> dict:
    """Per-law drift rates of the back-rotated conserved quantities.

    Each entry is max_k |Q(t_k) - Q(0)| / max(t_k, 1), certifying the global
    conservation laws of the deviation from the attracting mode.
    """
    mode = traj.mode
    names = None
    drift = {}
    base = None
    for k, t in enumerate(traj.times):
        tup = {c: traj.columns[c][k] for c in traj.columns}
        inv = invariants_from_tuple(tup, mode, t)
        if base is None:
            base = inv
            names = list(inv.keys())
            for nm in names:
                drift[nm] = 0.0
            continue
        for nm in names:
            rate = abs(inv[nm] - base[nm]) / max(t, 1.0)
            drift[nm] = max(drift[nm], rate)
    return drift
