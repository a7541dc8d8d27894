"""Command line front end: config parsing, scenario orchestration, reports.

Subcommands: evolve | modes | constants | verify.  The config file is JSON
(a key tree); unknown keys are rejected before any computation.  Parameter
sweeps (a list of override dicts under "sweep") fan out across worker
threads; each run is single-threaded and deterministic for a fixed seed.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import basis, collision, diagnostics, evolve, modes, potential, spectral


class ConfigError(Exception):
    pass


# -- schema -----------------------------------------------------------------------

_SCHEMA = {
    "potential": {
        "family": str,          # harmonic | anisotropic_harmonic | power_law |
                                # polynomial | radial_polynomial
        "dim": int,
        "p": list,              # anisotropic frequencies
        "gamma": (int, float),
        "a": (int, float),
        "coefficients": list,   # polynomial tables (nested arrays)
        "normalization": str,   # identity | generalized
    },
    "discretization": {
        "nx": (int, list),
        "nv": int,
        "half_width": (int, float, list, type(None)),
        "fd_order": int,
        "boundary_ratio": (int, float),
    },
    "collision": {"rate": (int, float)},
    "integrator": {
        "dt": (int, float),
        "t_end": (int, float),
        "output_stride": int,
        "scheme": str,
        "safety": (int, float),
        "transport": bool,
        "collision": bool,
        "store_fields": (bool, type(None)),
        "snapshot_times": list,
    },
    "initial": {
        "preset": str,          # maxwellian-perturbation | mode:<name> |
                                # hermite-mode | random-seeded
        "indices": list,
        "seed": int,
        "amplitude": (int, float),
        "max_degree": int,
    },
    "diagnostics": {
        "lyapunov": bool,
        "epsilon": (int, float),
        "constants": bool,
        "constants_nx": int,
        "htheorem": bool,
        "conservation_tol": (int, float),
    },
    "output": {"directory": str},
    "sweep": list,
}

_DEFAULTS = {
    "potential": {"family": "harmonic", "dim": 1, "normalization": "identity"},
    "discretization": {"nx": 256, "nv": 8, "half_width": None, "fd_order": 4,
                       "boundary_ratio": 1e-16},
    "collision": {"rate": 1.0},
    "integrator": {"dt": 1e-3, "t_end": 10.0, "output_stride": 100, "scheme": "strang",
                   "safety": 0.5, "transport": True, "collision": True,
                   "store_fields": None, "snapshot_times": []},
    "initial": {"preset": "random-seeded", "seed": 0, "amplitude": 1.0, "max_degree": 4,
                "indices": []},
    "diagnostics": {"lyapunov": False, "epsilon": 1e-2, "constants": True,
                    "constants_nx": 0, "htheorem": True, "conservation_tol": 1e-8},
    "output": {"directory": "out"},
}


def validate_config(cfg: dict) -> dict:
    """Schema check with unknown-key rejection; returns config with defaults filled."""
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    out = copy.deepcopy(_DEFAULTS)
    for section, body in cfg.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section {section!r}")
        if section == "sweep":
            if not isinstance(body, list):
                raise ConfigError("sweep must be a list of override objects")
            out["sweep"] = body
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for key, val in body.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            want = _SCHEMA[section][key]
            if not isinstance(val, want if isinstance(want, tuple) else (want,)):
                raise ConfigError(f"{section}.{key} has wrong type {type(val).__name__}")
            out[section][key] = val
    _check_semantics(out)
    return out


def _check_semantics(cfg):
    if cfg["discretization"]["nv"] < 4:
        raise ConfigError("discretization.nv must be >= 4 "
                          "(needed to represent h_perp and its stress moment)")
    if cfg["integrator"]["scheme"] not in ("strang", "rk4"):
        raise ConfigError("integrator.scheme must be strang or rk4")
    if cfg["potential"]["normalization"] not in ("identity", "generalized"):
        raise ConfigError("potential.normalization must be identity or generalized")
    if cfg["discretization"]["fd_order"] not in (2, 4, 6, 8):
        raise ConfigError("discretization.fd_order must be one of 2, 4, 6, 8")
    if cfg["collision"]["rate"] <= 0:
        raise ConfigError("collision.rate must be positive")


# -- construction ------------------------------------------------------------------

def build_potential(cfg) -> potential.Potential:
    p = cfg["potential"]
    fam = p["family"]
    generalized = p["normalization"] == "generalized"
    if fam == "harmonic":
        return potential.harmonic(p.get("dim", 1))
    if fam == "anisotropic_harmonic":
        return potential.anisotropic_harmonic(np.asarray(p["p"], dtype=float),
                                              generalized=generalized)
    if fam == "power_law":
        return potential.power_law(p.get("dim", 1), p.get("gamma", 4.0),
                                   p.get("a", 1.0), generalized=generalized)
    if fam == "polynomial":
        return potential.polynomial(p["coefficients"], generalized=generalized)
    if fam == "radial_polynomial":
        return potential.radial_polynomial(p.get("dim", 2), p["coefficients"],
                                           generalized=generalized)
    raise ConfigError(f"unknown potential family {fam!r}")


def build_discretization(cfg, pot=None) -> basis.Discretization:
    pot = pot or build_potential(cfg)
    sym = potential.detect_rotations(pot)
    dd = cfg["discretization"]
    return basis.make_discretization(pot, sym, nx=dd["nx"], nv=dd["nv"],
                                     half_width=dd["half_width"],
                                     fd_order=dd["fd_order"])


def make_initial(disc, cfg) -> basis.KineticState:
    ini = cfg["initial"]
    preset = ini["preset"]
    amp = float(ini["amplitude"])
    if preset == "maxwellian-perturbation":
        h = _random_datum(disc, ini["seed"], ini["max_degree"])
        h.C *= amp / disc.norm(h)
        h.C[0] += 1.0
        return h
    if preset == "random-seeded":
        h = _random_datum(disc, ini["seed"], ini["max_degree"])
        h.C *= amp / disc.norm(h)
        return h
    if preset.startswith("mode:"):
        name = preset.split(":", 1)[1]
        gen = modes.generators(disc)
        matches = [i for i, nm in enumerate(gen.names) if nm == name or nm.startswith(name)]
        if not matches:
            raise modes.ClassificationError(
                f"mode {name!r} not admitted by this potential; available: {gen.names}")
        h = gen.states[matches[0]]
        h.C *= amp
        return h
    if preset == "hermite-mode":
        return _hermite_datum(disc, ini["indices"], amp)
    raise ConfigError(f"unknown initial preset {preset!r}")


def _random_datum(disc, seed, max_degree) -> basis.KineticState:
    """Seeded random coefficients over Hermite modes of total degree <= max_degree."""
    rng = np.random.default_rng(seed)
    g, vb, d = disc.grid, disc.vbasis, disc.dim
    from numpy.polynomial import hermite_e

    hx = []
    for j in range(d):
        cols = []
        for deg in range(max_degree + 1):
            c = np.zeros(deg + 1)
            c[deg] = 1.0
            cols.append(hermite_e.hermeval(g.X[j], c) / math.sqrt(math.factorial(deg)))
        hx.append(cols)

    C_tensor = np.zeros((vb.size,) + g.shape)
    for a, beta in enumerate(vb.indices):
        vdeg = int(sum(beta))
        if vdeg > max_degree:
            continue
        for alpha in _degree_indices(d, max_degree - vdeg):
            coef = rng.standard_normal()
            f = np.ones(g.shape)
            for j in range(d):
                f = f * hx[j][alpha[j]]
            C_tensor[a] += coef * f
    h = disc.zero_state()
    h.C[:] = np.tensordot(vb.rotation, C_tensor, axes=(1, 0))
    return h


def _degree_indices(d, max_deg):
    from itertools import product

    return [k for k in product(range(max_deg + 1), repeat=d) if sum(k) <= max_deg]


def _hermite_datum(disc, indices, amp) -> basis.KineticState:
    d = disc.dim
    if len(indices) != 2 * d:
        raise ConfigError(f"hermite-mode needs {2*d} indices (x degrees then v degrees)")
    from numpy.polynomial import hermite_e

    g, vb = disc.grid, disc.vbasis
    xdeg, vdeg = indices[:d], indices[d:]
    f = np.ones(g.shape)
    for j in range(d):
        c = np.zeros(xdeg[j] + 1)
        c[xdeg[j]] = 1.0
        f = f * hermite_e.hermeval(g.X[j], c) / math.sqrt(math.factorial(xdeg[j]))
    C_tensor = np.zeros((vb.size,) + g.shape)
    pos = {tuple(k): a for a, k in enumerate(vb.indices)}
    if tuple(vdeg) not in pos:
        raise ConfigError(f"velocity degree {vdeg} exceeds basis order {vb.order}")
    C_tensor[pos[tuple(vdeg)]] = f
    h = disc.zero_state()
    h.C[:] = amp * np.tensordot(vb.rotation, C_tensor, axes=(1, 0))
    return h


# -- presets -----------------------------------------------------------------------

PRESETS = {
    "harmonic-d1": {
        "potential": {"family": "harmonic", "dim": 1},
        "discretization": {"nx": 256, "nv": 8, "half_width": 10.0},
        "integrator": {"dt": 2e-3, "t_end": 24.0, "output_stride": 50},
        "initial": {"preset": "random-seeded", "seed": 7},
        "diagnostics": {"lyapunov": True},
    },
    "quartic-d1": {
        "potential": {"family": "power_law", "dim": 1, "gamma": 4.0},
        "discretization": {"nx": 2048, "nv": 8},
        "integrator": {"dt": 4e-4, "t_end": 24.0, "output_stride": 250},
        "initial": {"preset": "random-seeded", "seed": 7},
    },
    "radial-d2": {
        "potential": {"family": "power_law", "dim": 2, "gamma": 4.0},
        "discretization": {"nx": 384, "nv": 8, "fd_order": 8},
        "integrator": {"dt": 2e-3, "t_end": 20.0, "output_stride": 100},
        "initial": {"preset": "random-seeded", "seed": 7},
        "diagnostics": {"constants": False},
    },
    "anisotropic-d2": {
        "potential": {"family": "anisotropic_harmonic", "p": [1.0, 1.4142135623730951],
                      "normalization": "generalized"},
        "discretization": {"nx": 192, "nv": 8},
        "integrator": {"dt": 3e-3, "t_end": 20.0, "output_stride": 100},
        "initial": {"preset": "random-seeded", "seed": 7},
        "diagnostics": {"constants": False},
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


# -- commands ----------------------------------------------------------------------

def _constants_grid(cfg, pot):
    nx = cfg["diagnostics"]["constants_nx"]
    if nx <= 0:
        nx = 512 if pot.dim == 1 else 160
    return basis.make_spatial_grid(pot, nx, fd_order=cfg["discretization"]["fd_order"])


def cmd_constants(cfg, outdir: Path) -> dict:
    pot = build_potential(cfg)
    sym = potential.detect_rotations(pot)
    grid = _constants_grid(cfg, pot)
    witten = basis.WittenOperator(grid)
    rep = spectral.build_report(pot, sym, grid, witten=witten, rate=cfg["collision"]["rate"])
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "constants.txt").write_text(rep.to_text(), encoding="utf-8")
    print(rep.to_text(), end="")
    return {"report": rep, "failures": []}


def cmd_modes(cfg, outdir: Path) -> dict:
    disc = build_discretization(cfg)
    h0 = make_initial(disc, cfg)
    frozen = not cfg["integrator"]["transport"]
    mode = modes.conserved_mode(h0, frozen=frozen)
    names, G = modes.orthonormality_gram(disc)
    gram_err = float(np.max(np.abs(G - np.eye(len(names)))))
    outdir.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {v!r}" for k, v in mode.as_dict().items()]
    lines.append(f"generators = {' '.join(names)}")
    lines.append(f"gram_max_deviation = {gram_err!r}")
    (outdir / "modes.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    np.savetxt(outdir / "gram.csv", G, delimiter=",", header=",".join(names))
    print("\n".join(lines))
    failures = []
    if gram_err > 10 * 1e-8:
        failures.append({"invariant": "generator orthonormality", "module": "modes",
                         "value": gram_err, "tolerance": 1e-7})
    return {"mode": mode, "gram": G, "failures": failures}


def cmd_evolve(cfg, outdir: Path) -> dict:
    disc = build_discretization(cfg)
    bgk = collision.BgkOperator(disc, rate=float(cfg["collision"]["rate"]))
    h0 = make_initial(disc, cfg)
    icfg = cfg["integrator"]
    run_cfg = evolve.IntegratorConfig(
        dt=float(icfg["dt"]), t_end=float(icfg["t_end"]),
        output_stride=int(icfg["output_stride"]), scheme=icfg["scheme"],
        safety=float(icfg["safety"]), transport=bool(icfg["transport"]),
        collision=bool(icfg["collision"]),
        store_fields=icfg["store_fields"],
        snapshot_times=tuple(icfg["snapshot_times"]),
    )
    traj = evolve.run(h0, bgk, run_cfg)

    failures = []
    dcfg = cfg["diagnostics"]
    if dcfg["htheorem"]:
        ht = diagnostics.htheorem_check(traj, bgk.rate)
        if not ht["passed"]:
            failures.append({"invariant": "H-theorem (microscopic dissipation)",
                             "module": "diagnostics", "value": ht["max_violation"]})
    drift = diagnostics.conservation_drift(traj)
    tol = dcfg["conservation_tol"] * max(traj.columns["norm_h"][0], 1e-300)
    for name, rate in drift.items():
        if rate > tol:
            failures.append({"invariant": f"conservation drift {name}",
                             "module": "modes", "value": rate, "tolerance": tol})

    witten = None
    if dcfg["lyapunov"]:
        witten = basis.WittenOperator(disc.grid)
        diagnostics.attach_lyapunov(traj, witten, eps=dcfg["epsilon"])

    rep = None
    if dcfg["constants"]:
        pot, sym = disc.potential, disc.symmetry
        cgrid = _constants_grid(cfg, pot)
        cw = basis.WittenOperator(cgrid) if int(np.prod(cgrid.shape)) <= 80000 else None
        rep = spectral.build_report(pot, sym, cgrid, witten=cw, rate=bgk.rate, traj=traj)
    else:
        rep = spectral.SpectralReport(c_collision=bgk.rate)
        try:
            rep.decay = spectral.fit_decay(traj)
        except spectral.DegenerateWindowError as exc:
            rep.notes["decay"] = str(exc)
        rep.validate()

    outdir.mkdir(parents=True, exist_ok=True)
    evolve.trajectory_to_csv(traj, outdir / "trajectory.csv")
    (outdir / "report.txt").write_text(rep.to_text(), encoding="utf-8")
    for t, C in traj.snapshots.items():
        evolve.write_snapshot(outdir / f"snapshot_t{t:g}.bin", C, t)
    summary = {
        "mode": traj.mode.as_dict(),
        "drift": drift,
        "kappa": rep.decay.kappa if rep.decay else None,
        "decay_flag": rep.decay.flag if rep.decay else None,
        "failures": failures,
    }
    (outdir / "summary.json").write_text(json.dumps(summary, indent=2, default=float),
                                         encoding="utf-8")
    print(rep.to_text(), end="")
    if failures:
        print(json.dumps({"failures": failures}, indent=2, default=float), file=sys.stderr)
    return {"trajectory": traj, "report": rep, "failures": failures}


def cmd_verify(cfg, outdir: Path) -> dict:
    """Fast invariant suite across modules; prints one pass/fail line per check."""
    from . import verify as _verify

    results = _verify.run_suite(cfg)
    outdir.mkdir(parents=True, exist_ok=True)
    lines = []
    failures = []
    for name, ok, detail in results:
        lines.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        if not ok:
            failures.append({"invariant": name, "detail": detail})
    text = "\n".join(lines) + "\n"
    (outdir / "verify.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return {"failures": failures}


COMMANDS = {
    "evolve": cmd_evolve,
    "modes": cmd_modes,
    "constants": cmd_constants,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="kinmodes")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", type=Path, default=None)
    ap.add_argument("--out", type=Path, default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--preset", type=str, default=None)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)

    raw = {}
    if args.preset is not None:
        if args.preset not in PRESETS:
            print(f"unknown preset {args.preset!r}; have {sorted(PRESETS)}", file=sys.stderr)
            return 2
        raw = copy.deepcopy(PRESETS[args.preset])
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as fh:
            raw = _merge(raw, json.load(fh))
    try:
        cfg = validate_config(raw)
    except ConfigError as exc:
        print(json.dumps({"failures": [{"invariant": "config schema", "detail": str(exc)}]}),
              file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg["initial"]["seed"] = args.seed

    threads = int(os.environ.get("KINMODES_THREADS", args.threads))
    outdir = args.out or Path(cfg["output"]["directory"])

    sweeps = cfg.pop("sweep", None)
    try:
        if sweeps:
            jobs = [validate_config(_merge(_unfilled(cfg), ov)) for ov in sweeps]
            with ThreadPoolExecutor(max_workers=max(threads, 1)) as ex:
                results = list(ex.map(
                    lambda iv: COMMANDS[args.command](iv[1], outdir / f"sweep_{iv[0]}"),
                    enumerate(jobs)))
            failures = [f for r in results for f in r["failures"]]
        else:
            failures = COMMANDS[args.command](cfg, outdir)["failures"]
    except (ConfigError, modes.ClassificationError, evolve.CflViolationError,
            evolve.NonFiniteStateError) as exc:
        print(json.dumps({"failures": [
            {"invariant": type(exc).__name__, "detail": str(exc.args[0] if exc.args else exc)}
        ]}), file=sys.stderr)
        return 2
    return 0 if not failures else 1


def _unfilled(cfg):
    # strip defaults already applied so sweep overrides re-validate cleanly
    return copy.deepcopy(cfg)


if __name__ == "__main__":
    sys.exit(main())
