"""Batch front end: JSON run configurations, presets, sweeps and CSV traces.

Usage::

    python -m stmaxwell --preset tm_energy --out runs/energy
    python -m stmaxwell --config my.json --sweep dt=0.125,0.0625,0.03125
    python -m stmaxwell --preset verwer_pt2 --dry-run
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .adaptivity import adapt_slab
from .fespace import DegreeVector, SpaceDescriptor, l2_project_nodal, nodal_energy
from .mesh import build_mesh, set_temporal_levels
from .solver import BudgetTracker, SolverConfig, iteration_error_bound
from .timeloop import (advance_slab, error_norms, initial_state, make_tm_mode, make_verwer,
                       nodal_error, zero_solution)

FIXTURES = ("tm_mode", "verwer", "zero")


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


@dataclass
class RunConfig:
    fixture: str = "tm_mode"
    mode_m: int = 1
    mode_n: int = 1
    box_lo: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    box_hi: list = field(default_factory=lambda: [1.0, 1.0, 0.2])
    dims: list = field(default_factory=lambda: [2, 2, 1])
    epsilon: float = 1.0
    mu: float = 1.0
    degrees: list = field(default_factory=lambda: [2, 2, 2, 2])  # p_t, p_x, p_y, p_z
    element_degrees: list = None  # optional per-element [p_t, p_x, p_y, p_z]
    temporal_level: int = 0
    element_levels: list = None  # optional per-element levels
    level_regions: list = field(default_factory=list)  # [{"lo", "hi", "level"}]
    dt: float = 0.05
    T: float = 0.4
    dissipation: float = 0.0
    solve_mode: str = "exact"
    restart: int = 30
    max_iter: int = 2000
    rtol: float = 1e-12
    eta_target: float = 0.0
    adapt: bool = False
    tol: float = 1e-4
    theta: float = 0.3
    max_rounds: int = 10
    track_errors: bool = True
    output: str = "out"

    def validate(self):
        if self.fixture not in FIXTURES:
            raise ConfigError(f"fixture: must be one of {', '.join(FIXTURES)}")
        for name in ("epsilon", "mu", "dt", "T", "rtol", "tol", "theta"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
                raise ConfigError(f"{name}: must be a positive number, got {v!r}")
        if self.theta > 1:
            raise ConfigError("theta: must lie in (0, 1]")
        if self.dissipation < 0 or self.eta_target < 0:
            raise ConfigError("dissipation and eta_target: must be non-negative")
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ConfigError("dims: need three positive integers")
        if len(self.box_lo) != 3 or len(self.box_hi) != 3 or any(
                b <= a for a, b in zip(self.box_lo, self.box_hi)):
            raise ConfigError("box_hi: must exceed box_lo in every direction")
        if len(self.degrees) != 4 or self.degrees[0] < 1 or min(self.degrees[1:]) < 0:
            raise ConfigError("degrees: need [p_t >= 1, p_x, p_y, p_z >= 0]")
        if self.temporal_level < 0:
            raise ConfigError("temporal_level: must be non-negative")
        if self.solve_mode not in ("exact", "inexact"):
            raise ConfigError("solve_mode: must be 'exact' or 'inexact'")
        if self.solve_mode == "inexact" and self.eta_target <= 0:
            raise ConfigError("eta_target: inexact solves need a positive budget")
        if self.restart < 1 or self.max_iter < 1 or self.max_rounds < 1:
            raise ConfigError("restart, max_iter, max_rounds: must be positive")
        n = int(np.prod(self.dims))
        for name in ("element_degrees", "element_levels"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise ConfigError(f"{name}: need one entry per coarse element ({n})")
        if self.fixture == "tm_mode":
            if self.mode_m < 1 or self.mode_n < 1:
                raise ConfigError("mode_m: TM mode numbers must be positive")
            if list(self.box_lo)[:2] != [0.0, 0.0] or list(self.box_hi)[:2] != [1.0, 1.0]:
                raise ConfigError("box_hi: the TM fixture lives on [0,1]^2 x [0, Lz]")
        if self.fixture == "verwer" and (list(self.box_lo) != [0.0] * 3
                                         or list(self.box_hi) != [1.0] * 3):
            raise ConfigError("box_hi: the verwer fixture lives on the unit cube")
        n_slabs = self.T / self.dt
        if abs(n_slabs - round(n_slabs)) > 1e-9 * max(1.0, n_slabs):
            raise ConfigError("dt: T must be an integer multiple of dt")
        return self

    @property
    def n_slabs(self):
        return int(round(self.T / self.dt))

    def canonical(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2) + "\n"


_FLOATS = {"epsilon", "mu", "dt", "T", "dissipation", "rtol", "eta_target", "tol", "theta"}


def parse_config(text):
    """Parse a JSON document into a validated RunConfig."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be an object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")
    vals = dict(raw)
    for k in _FLOATS & set(vals):
        if isinstance(vals[k], int) and not isinstance(vals[k], bool):
            vals[k] = float(vals[k])
    for k in ("box_lo", "box_hi"):
        if k in vals:
            vals[k] = [float(v) for v in vals[k]]
    return RunConfig(**vals).validate()


def load_preset(name):
    path = resources.files("stmaxwell") / "presets" / f"{name}.json"
    if not path.is_file():
        raise ConfigError(f"preset: no preset named {name!r} (have {', '.join(list_presets())})")
    return parse_config(path.read_text())


def list_presets():
    folder = resources.files("stmaxwell") / "presets"
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


# -- building blocks ----------------------------------------------------------------

def fixture_for(cfg):
    if cfg.fixture == "tm_mode":
        return make_tm_mode(cfg.mode_m, cfg.mode_n, cfg.box_hi[2], cfg.epsilon, cfg.mu)
    if cfg.fixture == "verwer":
        return make_verwer()
    return zero_solution()


def space_for(cfg):
    mesh = build_mesh(cfg.dims, cfg.box_lo, cfg.box_hi, cfg.epsilon, cfg.mu)
    n = mesh.n_elements
    if cfg.element_levels is not None:
        levels = [int(v) for v in cfg.element_levels]
    else:
        levels = [cfg.temporal_level] * n
        centers = mesh.centers()
        for reg in cfg.level_regions:
            lo, hi = np.asarray(reg["lo"], float), np.asarray(reg["hi"], float)
            for e in range(n):
                if np.all(centers[e] >= lo) and np.all(centers[e] <= hi):
                    levels[e] = int(reg["level"])
    degs = cfg.element_degrees if cfg.element_degrees is not None else [cfg.degrees] * n
    return SpaceDescriptor(mesh, set_temporal_levels(0.0, cfg.dt, levels),
                           [DegreeVector(*map(int, d)) for d in degs])


def solver_config_for(cfg):
    return SolverConfig(restart=cfg.restart, max_iter=cfg.max_iter, rtol=cfg.rtol,
                        mode=cfg.solve_mode, eta_target=cfg.eta_target)


def convergence_fit(steps, errors):
    """Least-squares slope of log(error) against log(step).

    Returns ``(order, residual)`` with the RMS residual of the log fit.
    """
    h = np.asarray(steps, dtype=float)
    e = np.asarray(errors, dtype=float)
    if h.size != e.size or h.size < 3:
        raise ValueError("convergence fit needs at least three (step, error) pairs")
    if np.any(h <= 0) or np.any(e <= 0):
        raise ValueError("convergence fit needs positive steps and errors")
    A = np.vstack([np.log(h), np.ones_like(h)]).T
    coef, *_ = np.linalg.lstsq(A, np.log(e), rcond=None)
    res = np.log(e) - A @ coef
    return float(coef[0]), float(np.sqrt(np.mean(res ** 2)))


# -- running --------------------------------------------------------------------------

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    # shortest round-trip form, so traces keep full double precision
    return repr(float(v)) if isinstance(v, float) else v


def run_experiment(cfg, out=None):
    """Run one configuration, writing CSV traces and ``summary.txt`` into
    ``out`` (default ``cfg.output``).  Returns ``(exit_status, summary)``."""
    out = Path(out or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    analytic = fixture_for(cfg)
    space = space_for(cfg)
    scfg = solver_config_for(cfg)
    mesh = space.mesh
    eps_min = min(mesh.eps(e) for e in range(mesh.n_elements))
    mu_min = min(mesh.mu(e) for e in range(mesh.n_elements))
    budget = None
    if cfg.solve_mode == "inexact":
        budget = BudgetTracker(cfg.eta_target, cfg.n_slabs, cfg.dt, cfg.T, eps_min, mu_min)

    st = initial_state(space, analytic, 0.0)
    energy_rows = [(0, 0.0, st.energy[0][1])]
    error_rows = [(0, 0.0, st.errors[0][1], 0.0)]
    iter_rows, adapt_rows, dofs = [], [], [space.n_unknowns]
    status, message = 0, "ok"
    try:
        for n in range(cfg.n_slabs):
            if cfg.adapt:
                t0 = st.time
                sp = space.with_slab(t0, t0 + cfg.dt)
                init = st.nodal if n > 0 else (
                    lambda m, d, t0=t0: l2_project_nodal(
                        lambda x, y, z: analytic.E(t0, x, y, z),
                        lambda x, y, z: analytic.H(t0, x, y, z), m, d))
                res = adapt_slab(sp, init, cfg.tol, cfg.theta, cfg.max_rounds, analytic.J,
                                 analytic.g, scfg, cfg.dissipation)
                U = res.state.U_H
                space = res.space
                if n == 0:
                    # the initial data were re-projected onto the adapted space
                    u0 = U.initial()
                    energy_rows[0] = (0, 0.0, nodal_energy(u0))
                    error_rows[0] = (0, 0.0, nodal_error(u0, analytic, 0.0), 0.0)
                for row in res.log:
                    adapt_rows.append((n + 1, row["round"], row["eta"], row["dofs"], row["choices"]))
                st.time, st.slab, st.nodal, st.last = t0 + cfg.dt, n + 1, U.end(), U
                iters = res.iterations
                dual = (float("nan"), float("nan"))
                part = float("nan")
                if cfg.track_errors:
                    nod, acc = error_norms(U, analytic)
                    st.acc_error_sq += acc
                    st.errors.append((st.time, nod, st.acc_error))
                conv = res.converged
            else:
                st = advance_slab(st, space, cfg.dt, scfg, analytic, cfg.dissipation, budget,
                                  cfg.track_errors)
                rep = st.report
                iters, dual, part = rep.iterations, (rep.dual_E, rep.dual_H), rep.eta_part
                conv = rep.converged or cfg.solve_mode == "inexact"
            dofs.append(space.n_unknowns)
            energy_rows.append((st.slab, st.time, nodal_energy(st.nodal)))
            if cfg.track_errors:
                _, nod, acc = st.errors[-1]
                error_rows.append((st.slab, st.time, nod, acc))
            iter_rows.append((st.slab, iters, dual[0], dual[1], part, space.n_unknowns))
            if not conv and not cfg.adapt:
                status, message = 1, f"solver did not converge on slab {st.slab}"
                break
    finally:
        _write_csv(out / "energy.csv", ["slab", "time", "energy"],
                   [[r[0], _fmt(r[1]), _fmt(r[2])] for r in energy_rows])
        _write_csv(out / "error.csv", ["slab", "time", "nodal_error", "accumulated_error"],
                   [[r[0], _fmt(r[1]), _fmt(r[2]), _fmt(r[3])] for r in error_rows])
        _write_csv(out / "iters.csv", ["slab", "iterations", "dual_E", "dual_H", "eta_part", "dofs"],
                   [[r[0], r[1], _fmt(r[2]), _fmt(r[3]), _fmt(r[4]), r[5]] for r in iter_rows])
        _write_csv(out / "adapt.csv", ["slab", "round", "eta", "dofs", "choices"],
                   [[r[0], r[1], _fmt(r[2]), r[3], r[4]] for r in adapt_rows])

    e0 = energy_rows[0][2]
    summary = {
        "status": message,
        "slabs": len(iter_rows),
        "dofs": dofs[-1],
        "iterations": int(sum(r[1] for r in iter_rows)),
        "final_nodal_error": error_rows[-1][2] if cfg.track_errors else float("nan"),
        "accumulated_error": error_rows[-1][3] if cfg.track_errors else float("nan"),
        "max_nodal_error": max(r[2] for r in error_rows) if cfg.track_errors else float("nan"),
        "energy_drift": max(abs(r[2] - e0) for r in energy_rows) / e0 if e0 > 0 else 0.0,
    }
    if not cfg.adapt and not space.has_local_time_refinement():
        summary["eta_it"] = iteration_error_bound(
            [(r[2], r[3]) for r in iter_rows], cfg.dt, cfg.T, eps_min, mu_min)
    with open(out / "summary.txt", "w") as fh:
        for k, v in summary.items():
            fh.write(f"{k} = {_fmt(v)}\n")
    return status, summary


_SHORTHAND = {"p": "uniform degree (p_t = p_x = p_y = p_z)", "pt": "temporal degree"}


def apply_override(cfg, key, value):
    """Copy of ``cfg`` with one field replaced; ``p`` and ``pt`` are shorthands
    for the degree vector."""
    vals = dataclasses.asdict(cfg)
    if key == "p":
        vals["degrees"] = [int(value)] * 4
        vals["element_degrees"] = None
    elif key == "pt":
        vals["degrees"] = [int(value)] + list(cfg.degrees[1:])
        if cfg.element_degrees is not None:
            vals["element_degrees"] = [[int(value)] + list(d[1:]) for d in cfg.element_degrees]
    elif key in vals:
        cur = vals[key]
        vals[key] = type(cur)(value) if isinstance(cur, (int, float, str)) and not isinstance(
            cur, bool) else json.loads(value)
    else:
        raise ConfigError(f"{key}: unknown sweep key")
    return parse_config(json.dumps(vals))


def run_sweep(cfg, key, values, out):
    """Run one experiment per value; the summary table gains a fitted order
    when sweeping ``dt``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows, status = [], 0
    for v in values:
        c = apply_override(cfg, key, v)
        st, summ = run_experiment(c, out / f"{key}={v}")
        status = max(status, st)
        rows.append((v, summ))
    lines = [f"sweep {key}", "value accumulated_error max_nodal_error dofs iterations"]
    for v, s in rows:
        lines.append(f"{v} {s['accumulated_error']:.6e} {s['max_nodal_error']:.6e} "
                     f"{s['dofs']} {s['iterations']}")
    if key == "dt" and len(rows) >= 3:
        steps = [float(v) for v, _ in rows]
        for col in ("accumulated_error", "max_nodal_error"):
            order, res = convergence_fit(steps, [s[col] for _, s in rows])
            lines.append(f"order {col} = {order:.4f} (residual {res:.2e})")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    return status, text


def main(argv=None):
    ap = argparse.ArgumentParser(prog="stmaxwell", description=__doc__.splitlines()[0])
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", type=Path, help="JSON run configuration")
    src.add_argument("--preset", help="shipped preset name")
    ap.add_argument("--out", help="output directory (overrides the config)")
    ap.add_argument("--sweep", help="KEY=v1,v2,... parameter sweep")
    ap.add_argument("--dry-run", action="store_true", help="echo the canonical config and exit")
    args = ap.parse_args(argv)
    try:
        cfg = parse_config(args.config.read_text()) if args.config else load_preset(args.preset)
        sweep = None
        if args.sweep:
            key, _, vals = args.sweep.partition("=")
            if not vals:
                raise ConfigError("sweep: expected KEY=v1,v2,...")
            sweep = (key.strip(), [v.strip() for v in vals.split(",") if v.strip()])
            apply_override(cfg, sweep[0], sweep[1][0])
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.dry_run:
        sys.stdout.write(cfg.canonical())
        if sweep:
            print(f"# sweep {sweep[0]} over {', '.join(sweep[1])}")
        return 0
    out = args.out or cfg.output
    if sweep:
        status, text = run_sweep(cfg, *sweep, out)
        sys.stdout.write(text)
        return status
    status, summ = run_experiment(cfg, out)
    for k, v in summ.items():
        print(f"{k} = {_fmt(v)}")
    return status


if __name__ == "__main__":
    sys.exit(main())
