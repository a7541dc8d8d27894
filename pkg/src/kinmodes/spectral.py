"""Constants that govern the decay rate: Poincare, rigidity, collision gap,
and the empirical (C, kappa) fitted from a trajectory."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .basis import SpatialGrid, WittenOperator
from .potential import Potential, SymmetryStructure


class ClusterAtBottomError(Exception):
    """Spectral gap below eigensolver resolution; refusing to guess."""


class UndefinedRigidityError(Exception):
    """R_phi^perp is trivial (d = 1, or fully rotation-invariant in d = 2)."""


class DegenerateWindowError(Exception):
    pass


def poincare_constant(witten: WittenOperator):
    """c_P = lambda_2 - 1 with lambda_2 the second eigenvalue of Omega.

    Returns (c_P, eigenvalue residual, eigenvector in L^2(rho)).
    """
    lam = witten.eigenvalues
    if lam is None or lam.size < 2:
        raise ClusterAtBottomError("need at least two eigenvalues")
    if lam[1] - lam[0] < 1e-10 * max(abs(lam[1]), 1.0):
        raise ClusterAtBottomError(f"lambda_2 - lambda_1 = {lam[1]-lam[0]:.3e} below resolution")
    v = witten.eigenfunction(1)
    resid = witten.grid.norm(witten.apply(v) - lam[1] * v)
    return float(lam[1] - 1.0), float(resid), v


def rigidity_constant(pot: Potential, sym: SymmetryStructure, grid: SpatialGrid):
    """Smallest Rayleigh quotient <|grad phi . Ax|^2> / <|Ax|^2> over R_phi^perp.

    The minimization space is the d(d-1)/2-dimensional skew space restricted to
    the orthogonal complement of the detected rotations, so this is an exact
    finite-dimensional symmetric eigenproblem (the complement basis is already
    orthonormal in the <Ax . Bx> metric).
    """
    comp = sym.rotation_complement
    if pot.dim < 2 or not comp:
        raise UndefinedRigidityError("no skew directions transverse to the symmetries")
    n = len(comp)
    G = np.zeros((n, n))
    M = np.zeros((n, n))
    fields = [np.tensordot(A, grid.X, axes=(1, 0)) for A in comp]
    proj = [np.sum(grid.grad_phi * F, axis=0) for F in fields]
    for i in range(n):
        for j in range(i, n):
            G[i, j] = G[j, i] = grid.integrate(proj[i] * proj[j])
            M[i, j] = M[j, i] = grid.integrate(np.sum(fields[i] * fields[j], axis=0))
    w, V = np.linalg.eigh(M)
    Mih = V @ np.diag(w ** -0.5) @ V.T
    lam, U = np.linalg.eigh(Mih @ G @ Mih)
    a = Mih @ U[:, 0]
    A_star = sum(a[k] * comp[k] for k in range(n))
    return float(lam[0]), A_star


def rigidity_rayleigh(pot: Potential, grid: SpatialGrid, A: np.ndarray) -> float:
    """Rayleigh quotient of a single skew matrix; brute-force oracle hook."""
    Ax = np.tensordot(A, grid.X, axes=(1, 0))
    num = grid.integrate(np.sum(grid.grad_phi * Ax, axis=0) ** 2)
    den = grid.integrate(np.sum(Ax * Ax, axis=0))
    return num / den


@dataclass
class DecayFit:
    C: float
    kappa: float
    r_squared: float
    window: tuple
    flag: str = "ok"        # ok | OscillatoryOrPreasymptotic | AlreadyConverged


def fit_decay(traj, window: tuple | None = None, r2_threshold: float = 0.99) -> DecayFit:
    """Least-squares line fit of log dist_mode versus t.

    Default window: the last two thirds of the trajectory after dist_mode has
    dropped by one decade, skipping the pre-asymptotic transient.
    """
    t = traj.times
    dist = traj.columns["dist_mode"]
    scale = max(traj.columns["norm_h"][0], 1e-300)
    if np.max(dist) < 1e-8 * scale:
        return DecayFit(C=0.0, kappa=0.0, r_squared=1.0, window=(t[0], t[-1]),
                        flag="AlreadyConverged")
    if window is None:
        dropped = np.nonzero(dist <= dist[0] / 10.0)[0]
        t0 = t[dropped[0]] if dropped.size else t[0]
        t0 = t0 + (t[-1] - t0) / 3.0
        window = (t0, t[-1])
    sel = (t >= window[0]) & (t <= window[1]) & (dist > 0)
    if sel.sum() < 10:
        raise DegenerateWindowError(f"only {int(sel.sum())} samples in window {window}")
    x = t[sel]
    y = np.log(dist[sel])
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, intercept), res, *_ = np.linalg.lstsq(A, y, rcond=None)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(res[0]) if res.size else float(np.sum((A @ [slope, intercept] - y) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    flag = "ok" if r2 > r2_threshold else "OscillatoryOrPreasymptotic"
    return DecayFit(C=float(np.exp(intercept)), kappa=float(-slope), r_squared=float(r2),
                    window=tuple(window), flag=flag)


@dataclass
class SpectralReport:
    c_poincare: float | None = None
    c_poincare_residual: float | None = None
    c_rigidity: float | None = None
    rigidity_matrix: np.ndarray | None = None
    c_collision: float = 1.0
    moment_constant: float | None = None
    d_phi: int | None = None
    n_rotations: int | None = None
    decay: DecayFit | None = None
    notes: dict = field(default_factory=dict)

    def validate(self):
        if self.c_poincare is not None and not self.c_poincare > 0:
            raise ValueError(f"c_P = {self.c_poincare} must be positive")
        if self.c_rigidity is not None and not self.c_rigidity > 0:
            raise ValueError(f"c_K = {self.c_rigidity} must be positive")
        if self.decay is not None and self.decay.flag == "ok":
            if self.decay.kappa > self.c_collision * (1 + 1e-6):
                raise ValueError(
                    f"fitted kappa {self.decay.kappa} exceeds the collision gap "
                    f"{self.c_collision}")

    def to_text(self) -> str:
        """Flat key-value serialization for the run summary."""
        rows = []

        def put(k, v):
            if v is None:
                return
            rows.append(f"{k} = {v}")

        put("c_poincare", self.c_poincare)
        put("c_poincare_residual", self.c_poincare_residual)
        put("c_rigidity", self.c_rigidity)
        put("c_collision", self.c_collision)
        put("moment_constant_H6", self.moment_constant)
        put("d_phi", self.d_phi)
        put("n_rotations", self.n_rotations)
        if self.rigidity_matrix is not None:
            put("rigidity_matrix", " ".join(f"{v:.12g}" for v in self.rigidity_matrix.ravel()))
        if self.decay is not None:
            put("decay_C", self.decay.C)
            put("decay_kappa", self.decay.kappa)
            put("decay_r_squared", self.decay.r_squared)
            put("decay_window", f"{self.decay.window[0]:.6g} {self.decay.window[1]:.6g}")
            put("decay_flag", self.decay.flag)
        for k, v in self.notes.items():
            put(k, v)
        return "\n".join(rows) + "\n"


def build_report(pot, sym, grid, witten=None, rate=1.0, traj=None) -> SpectralReport:
    rep = SpectralReport(c_collision=rate, moment_constant=pot.moment_bound,
                         d_phi=sym.d_phi, n_rotations=len(sym.rotation_basis))
    if witten is not None:
        cp, resid, _ = poincare_constant(witten)
        rep.c_poincare, rep.c_poincare_residual = cp, resid
    try:
        ck, A = rigidity_constant(pot, sym, grid)
        rep.c_rigidity, rep.rigidity_matrix = ck, A
    except UndefinedRigidityError as exc:
        rep.notes["rigidity"] = f"undefined ({exc})"
    if traj is not None:
        try:
            rep.decay = fit_decay(traj)
        except DegenerateWindowError as exc:
            rep.notes["decay"] = f"degenerate window ({exc})"
    rep.validate()
    return rep
