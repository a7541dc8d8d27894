"""Semi-discrete time integration of dh/dt = T h + C h with trajectory recording.

Default scheme is Strang splitting with the collision factor applied exactly
(the BGK substep is a scalar relaxation of the microscopic block), so the
H-theorem holds exactly for the collision part and the transport error is
isolated in the RK4 substep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import hermite_e

from ._kernels import TransportKernel
from .basis import Discretization, KineticState
from .collision import BgkOperator, macro_norms
from .modes import (SpecialMode, conserved_mode, conserved_tuple, mode_distance)


class CflViolationError(Exception):
    pass


class NonFiniteStateError(Exception):
    """Blow-up detected; the trajectory holds the last valid time."""


@dataclass
class IntegratorConfig:
    dt: float = 1e-3
    t_end: float = 10.0
    output_stride: int = 50
    scheme: str = "strang"            # "strang" or "rk4"
    safety: float = 0.5
    transport: bool = True
    collision: bool = True
    store_fields: bool | None = None  # default: d == 1
    snapshot_times: tuple = ()

    def __post_init__(self):
        if self.scheme not in ("strang", "rk4"):
            raise ValueError(f"unknown scheme {self.scheme!r}")


def max_velocity_node(nv: int) -> float:
    """Largest Gauss-Hermite node of the N_v + 2 rule, bounding the v.grad_x block."""
    nodes, _ = hermite_e.hermegauss(nv + 2)
    return float(np.max(np.abs(nodes)))


def cfl_limit(disc: Discretization, rate: float) -> float:
    vmax = max_velocity_node(disc.vbasis.order)
    return min(float(np.min(disc.grid.dx)) / vmax, 1.0 / rate)


@dataclass
class Trajectory:
    times: np.ndarray
    columns: dict
    mode: SpecialMode
    disc: Discretization
    dt: float
    out_dt: float
    states: list | None = None        # full coefficient snapshots per output
    snapshots: dict = field(default_factory=dict)
    aborted: bool = False
    abort_reason: str = ""

    def column_names(self):
        return list(self.columns.keys())

    def __len__(self):
        return len(self.times)


def transport_apply(h: KineticState, kernel: TransportKernel | None = None) -> KineticState:
    """T h = -v . grad_x h + grad phi . grad_v h on the discretization."""
    kernel = kernel or TransportKernel(h.disc)
    out = h.disc.zero_state(h.t)
    kernel.rhs(out.C, h.C)
    return out


def step(h: KineticState, dt: float, bgk: BgkOperator, kernel: TransportKernel,
         cfg: IntegratorConfig, work) -> None:
    """One time step, in place."""
    if cfg.scheme == "strang":
        if cfg.collision:
            bgk.relax(h.C, 0.5 * dt)
        if cfg.transport:
            kernel.rk4_step(h.C, dt, work)
        if cfg.collision:
            bgk.relax(h.C, 0.5 * dt)
    else:
        _rk4_full(h.C, dt, bgk if cfg.collision else None,
                  kernel if cfg.transport else None, work)
    h.t += dt


def _rk4_full(C, dt, bgk, kernel, work):
    k, acc, tmp = work

    def rhs(out, u):
        if kernel is not None:
            kernel.rhs(out, u)
        else:
            out[:] = 0.0
        if bgk is not None:
            ks = bgk.kernel_size
            out[ks:] -= bgk.rate * u[ks:]

    rhs(k, C)
    acc[:] = k
    np.multiply(k, 0.5 * dt, out=tmp); tmp += C
    rhs(k, tmp)
    acc += 2.0 * k
    np.multiply(k, 0.5 * dt, out=tmp); tmp += C
    rhs(k, tmp)
    acc += 2.0 * k
    np.multiply(k, dt, out=tmp); tmp += C
    rhs(k, tmp)
    acc += k
    C += (dt / 6.0) * acc


def run(h0: KineticState, bgk: BgkOperator, cfg: IntegratorConfig,
        mode: SpecialMode | None = None) -> Trajectory:
    """Integrate and record norms, conserved moments and mode-relative distance."""
    disc = h0.disc
    if cfg.transport and cfg.dt > cfg.safety * cfl_limit(disc, bgk.rate) * (1 + 1e-12):
        raise CflViolationError(
            f"dt={cfg.dt} exceeds safety*min(dx/vmax, 1/rate)="
            f"{cfg.safety * cfl_limit(disc, bgk.rate):.3e}")

    kernel = TransportKernel(disc)
    work = kernel.make_work()
    if mode is None:
        mode = conserved_mode(h0, frozen=not cfg.transport)

    store_fields = cfg.store_fields if cfg.store_fields is not None else disc.dim == 1
    n_steps = int(round(cfg.t_end / cfg.dt))
    h = h0.copy()

    times, rows = [], []
    states = [] if store_fields else None
    snapshots = {}
    snap_left = sorted(cfg.snapshot_times)
    aborted, reason = False, ""
    prev_norm = None

    def record():
        nr, nm, ne, nperp = macro_norms(h)
        row = {
            "norm_h": disc.norm(h), "norm_hperp": nperp,
            "norm_r": nr, "norm_m": nm, "norm_e": ne,
            "dist_mode": mode_distance(h, mode),
        }
        row.update(conserved_tuple(h))
        times.append(h.t)
        rows.append(row)
        if store_fields:
            states.append(h.C.copy())
        return row["norm_h"]

    prev_norm = record()
    for k in range(1, n_steps + 1):
        step(h, cfg.dt, bgk, kernel, cfg, work)
        while snap_left and h.t >= snap_left[0] - 0.5 * cfg.dt:
            snapshots[snap_left.pop(0)] = h.C.copy()
        if k % cfg.output_stride == 0 or k == n_steps:
            if not np.isfinite(h.C).all():
                aborted, reason = True, "non-finite state"
                break
            n = record()
            if n > prev_norm * 1.01 + 1e-300:
                aborted, reason = True, f"norm grew {n/max(prev_norm,1e-300):.4f}x between outputs"
                break
            prev_norm = n

    cols = {k: np.array([r[k] for r in rows]) for k in rows[0]}
    traj = Trajectory(
        times=np.array(times), columns=cols, mode=mode, disc=disc,
        dt=cfg.dt, out_dt=cfg.dt * cfg.output_stride, states=states,
        snapshots=snapshots, aborted=aborted, abort_reason=reason,
    )
    if aborted:
        raise NonFiniteStateError(reason, traj)
    return traj


# -- higher velocity moments -------------------------------------------------------

def stress_moment(h: KineticState) -> np.ndarray:
    """E[h]_ij = int (v_i v_j - delta_ij) h mu dv, from basis coefficients."""
    disc = h.disc
    d, vb = disc.dim, disc.vbasis
    pos = {tuple(k): a for a, k in enumerate(vb.indices)}
    # recover tensor-basis coefficients of the pure-quadratic block
    quad_final = [vb.rotation[:, pos[tuple(2 * np.eye(d, dtype=int)[j])]] for j in range(d)]
    E = np.zeros((d, d) + disc.grid.shape)
    for i in range(d):
        y = np.tensordot(quad_final[i], h.C, axes=(0, 0))
        E[i, i] = math.sqrt(2.0) * y
        for j in range(i + 1, d):
            k = [0] * d
            k[i] = k[j] = 1
            slot = _final_slot(vb, tuple(k))
            E[i, j] = E[j, i] = h.C[slot]
    return E


def heat_moment(h: KineticState) -> np.ndarray:
    """Theta[h]_i = int v_i (E(v) - sqrt(2/d)) h mu dv; a pure h_perp functional."""
    disc = h.disc
    d, vb = disc.dim, disc.vbasis
    out = np.zeros((d,) + disc.grid.shape)
    for i in range(d):
        k3 = [0] * d
        k3[i] = 3
        acc = math.sqrt(3.0) * h.C[_final_slot(vb, tuple(k3))]
        for j in range(d):
            if j == i:
                continue
            k = [0] * d
            k[i] = 1
            k[j] = 2
            acc = acc + h.C[_final_slot(vb, tuple(k))]
        out[i] = acc / math.sqrt(d)
    return out


def _final_slot(vb, index: tuple) -> int:
    """Final-basis position of a tensor multi-index untouched by the E-rotation."""
    pos = {tuple(k): a for a, k in enumerate(vb.indices)}
    col = pos[index]
    row = np.nonzero(np.abs(vb.rotation[:, col]) > 0.5)[0]
    return int(row[0])


def macroscopic_residuals(h_before: KineticState, h_after: KineticState, dt: float,
                          bgk: BgkOperator) -> dict:
    """Finite-difference-in-time residuals of the five macroscopic equations.

    Midpoint rule in time against spatial stencils; O(dt^2 + dx^order) for
    smooth states.
    """
    from .collision import micro_projection

    disc = h_before.disc
    g, d = disc.grid, disc.dim
    c2d = math.sqrt(2.0 / d)

    mid = h_before.copy()
    mid.C = 0.5 * (h_before.C + h_after.C)
    r0, m0, e0, _ = micro_projection(h_before)
    r1, m1, e1, _ = micro_projection(h_after)
    r, m, e, hperp = micro_projection(mid)
    E_perp = stress_moment(hperp)
    Th_perp = heat_moment(hperp)

    Lperp = transport_apply(hperp)
    ks = disc.vbasis.kernel_size
    Lperp.C[ks:] -= bgk.rate * hperp.C[ks:]
    E_L = stress_moment(Lperp)
    Th_L = heat_moment(Lperp)

    res = {}
    res["density"] = g.norm((r1 - r0) / dt - g.div_star(m))
    mom = 0.0
    grad_r = g.grad(r)
    for j in range(d):
        star_e = -g.deriv(e, j) + g.grad_phi[j] * e
        div_star_E = g.div_star(E_perp[j])
        mom += g.inner((m1[j] - m0[j]) / dt - (-grad_r[j] + c2d * star_e + div_star_E),
                       (m1[j] - m0[j]) / dt - (-grad_r[j] + c2d * star_e + div_star_E))
    res["momentum"] = math.sqrt(max(mom, 0.0))
    div_m = sum(g.deriv(m[j], j) for j in range(d))
    res["energy"] = g.norm((e1 - e0) / dt - (-c2d * div_m + g.div_star(Th_perp)))

    E_mid0 = stress_moment(h_before)
    E_mid1 = stress_moment(h_after)
    acc = 0.0
    for i in range(d):
        for j in range(d):
            sym = 0.5 * (g.deriv(m[i], j) + g.deriv(m[j], i))
            lhs = (E_mid1[i, j] - E_mid0[i, j]) / dt - (-2.0 * sym + E_L[i, j])
            acc += g.inner(lhs, lhs)
    res["stress"] = math.sqrt(max(acc, 0.0))

    T0 = heat_moment(h_before)
    T1 = heat_moment(h_after)
    acc = 0.0
    for j in range(d):
        lhs = (T1[j] - T0[j]) / dt - (-(1 + 2.0 / d) * g.deriv(e, j) + Th_L[j])
        acc += g.inner(lhs, lhs)
    res["heat"] = math.sqrt(max(acc, 0.0))
    return res


# -- trajectory export --------------------------------------------------------------

CSV_BASE_COLUMNS = ["t", "norm_h", "norm_hperp", "norm_r", "norm_m", "norm_e", "dist_mode",
                    "mass", "energy"]


def trajectory_to_csv(traj: Trajectory, path) -> None:
    names = [c for c in traj.columns if c not in CSV_BASE_COLUMNS]
    header = CSV_BASE_COLUMNS[1:] + sorted(names)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(["t"] + header) + "\n")
        for i, t in enumerate(traj.times):
            vals = [t] + [traj.columns[c][i] for c in header]
            fh.write(",".join(f"{v:.17g}" for v in vals) + "\n")


def write_snapshot(path, C: np.ndarray, t: float) -> None:
    """Flat binary tensor with a small text header (dims, dtype, ordering)."""
    with open(path, "wb") as fh:
        head = (
            "kinmodes-snapshot 1\n"
            f"dims {' '.join(str(n) for n in C.shape)}\n"
            f"dtype {C.dtype.name}\n"
            "order C\n"
            f"t {t!r}\n"
            "end\n"
        )
        fh.write(head.encode("utf-8"))
        fh.write(np.ascontiguousarray(C).tobytes())


def read_snapshot(path):
    with open(path, "rb") as fh:
        lines = []
        while True:
            line = fh.readline().decode("utf-8").strip()
            lines.append(line)
            if line == "end":
                break
        meta = dict(l.split(" ", 1) for l in lines[1:-1])
        shape = tuple(int(s) for s in meta["dims"].split())
        dtype = np.dtype(meta["dtype"])
        t = float(meta["t"])
        C = np.frombuffer(fh.read(), dtype=dtype).reshape(shape)
    return C.copy(), t
