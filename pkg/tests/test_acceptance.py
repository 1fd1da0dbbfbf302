"""Acceptance criteria 1-9.  Each test records a PASS/FAIL verdict that the
conftest hook prints at the end of the session, one line per criterion."""
import csv
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from dense_oracle import Oracle
from stmaxwell import basis1d as b1
from stmaxwell.adaptivity import solve_pair
from stmaxwell.cli import convergence_fit, load_preset, run_experiment, run_sweep
from stmaxwell.fespace import (DegreeVector, NodalState, SpaceDescriptor, l2_project_nodal,
                               nodal_energy, temporal_projector, trial_from_vector)
from stmaxwell.mesh import build_mesh, set_temporal_levels
from stmaxwell.residual import SlabOperator
from stmaxwell.solver import SolverConfig
from stmaxwell.timeloop import make_tm_mode, make_verwer, march
from test_residual import G_SRC, J_SRC, SUITE, random_state


def report(n, name, ok, detail):
    ACCEPTANCE[n] = (bool(ok), name, detail)
    print(f"criterion {n} {'PASS' if ok else 'FAIL'}: {name} ({detail})")
    assert ok, f"criterion {n} failed: {detail}"


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_criterion_1_energy_conservation(tmp_path):
    cfg = load_preset("tm_energy")
    assert set(cfg.element_levels) == {0, 1, 2}
    assert {d[0] for d in cfg.element_degrees} == {1, 2}
    assert cfg.dissipation == 0.0 and cfg.n_slabs == 50
    status, _ = run_experiment(cfg, tmp_path)
    rows = read_csv(tmp_path / "energy.csv")
    E = np.array([float(r["energy"]) for r in rows])
    drift = float(np.max(np.abs(E - E[0])) / E[0])
    report(1, "energy conservation, mixed temporal levels and p_t", status == 0
           and len(E) == 51 and drift <= 1e-11, f"max relative drift {drift:.2e} over {len(E) - 1} slabs")


def test_criterion_2_temporal_orders(tmp_path):
    steps = ["0.125", "0.0625", "0.03125", "0.015625"]
    details, ok = [], True
    for pt in (1, 2, 3):
        cfg = load_preset(f"verwer_pt{pt}")
        assert cfg.degrees == [pt, 2, 0, 2] and cfg.level_regions
        status, text = run_sweep(cfg, "dt", steps, tmp_path / f"pt{pt}")
        rows = [line.split() for line in text.splitlines()[2:2 + len(steps)]]
        h = [float(r[0]) for r in rows]
        l2 = convergence_fit(h, [float(r[1]) for r in rows])[0]
        nod = convergence_fit(h, [float(r[2]) for r in rows])[0]
        ok &= status == 0 and abs(l2 - (pt + 1)) <= 0.25
        if pt <= 2:
            ok &= abs(nod - 2 * pt) <= 0.4
        details.append(f"p_t={pt}: L2 {l2:.2f}, nodal {nod:.2f}")
    report(2, "temporal convergence orders with local time refinement", ok, "; ".join(details))


def test_criterion_3_p_convergence(tmp_path):
    cfg = load_preset("tm_pconv")
    status, text = run_sweep(cfg, "p", ["1", "2", "3", "4"], tmp_path)
    errs = [float(line.split()[1]) for line in text.splitlines()[2:6]]
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    report(3, "p-convergence of the TM mode", status == 0 and min(ratios) >= 5.0,
           "error ratios per degree " + ", ".join(f"{r:.1f}" for r in ratios))


def test_criterion_4_oracle_equivalence():
    worst = 0.0
    for _, mesh, levels, degs in SUITE:
        for c in (0.0, 0.5):
            sp = SpaceDescriptor(mesh, set_temporal_levels(0.3, 0.5, levels), degs)
            U = random_state(sp, np.random.default_rng(len(levels)))
            R = SlabOperator(sp, c).full_residual(U, J_SRC, G_SRC, nq=8)
            RE, RH = Oracle(sp, c, nq=8).residual(U, J_SRC, G_SRC)
            err = max(max(np.max(np.abs(a - b)) for a, b in zip(R.E, RE)),
                      max(np.max(np.abs(a - b)) for a, b in zip(R.H, RH)))
            worst = max(worst, err)
    report(4, "matrix-free residual equals dense quadrature oracle", worst <= 1e-11,
           f"max entrywise difference {worst:.2e} over {2 * len(SUITE)} configurations")


def test_criterion_5_kernel_complexity():
    ps = np.arange(2, 9)
    flops = []
    for p in ps:
        mesh = build_mesh((2, 2, 1)).refine([0])
        n = mesh.n_elements
        sp = SpaceDescriptor(mesh, set_temporal_levels(0, 0.1, [e % 2 for e in range(n)]),
                             [DegreeVector.uniform(int(p))] * n)
        op = SlabOperator(sp, 0.5)
        U = trial_from_vector(sp, np.random.default_rng(0).standard_normal(sp.n_unknowns))
        op.ws.reset()
        op.apply(U)
        flops.append(op.ws.total(("mass", "curl", "flux")))
    logf = np.log(np.array(flops, dtype=float))
    slope_modes = np.polyfit(np.log(ps + 1.0), logf, 1)[0]
    slope_degree = np.polyfit(np.log(ps.astype(float)), logf, 1)[0]
    report(5, "flop count grows like the fourth power of the 1D mode count",
           3.6 <= slope_modes <= 4.6,
           f"slope vs p+1 = {slope_modes:.2f}, vs p = {slope_degree:.2f}")


@pytest.fixture(scope="module")
def tm_setup():
    sol = make_tm_mode(1, 1, 0.2)
    mesh = build_mesh((2, 2, 1), hi=(1.0, 1.0, 0.2))
    space = SpaceDescriptor.uniform(mesh, 0.0, 0.05, 2)
    exact = march(space, sol, 20, 0.05, SolverConfig(rtol=1e-13, restart=10, max_iter=4000),
                  track_errors=False)
    return sol, space, exact


def test_criterion_6_guaranteed_iteration_bound(tm_setup):
    sol, space, exact = tm_setup
    rng = np.random.default_rng(2024)
    effs, ok = [], True
    for eta_star in 10 ** rng.uniform(-6, -2, 20):
        cfg = SolverConfig(rtol=1e-13, restart=10, mode="inexact", eta_target=float(eta_star))
        st = march(space, sol, 20, 0.05, cfg, track_errors=False)
        diff = NodalState(space.mesh, st.nodal.degrees,
                          [a - b for a, b in zip(st.nodal.E, exact.nodal.E)],
                          [a - b for a, b in zip(st.nodal.H, exact.nodal.H)])
        measured = math.sqrt(2.0 * nodal_energy(diff))
        bound = st.budget.eta
        ok &= measured <= bound and bound <= eta_star * (1 + 1e-12)
        effs.append(bound / measured)
    ok &= min(effs) >= 1.0 and max(effs) <= 20.0
    report(6, "iteration-error bound holds on 20 randomized runs", ok,
           f"efficiency index {min(effs):.2f} to {max(effs):.2f}")


def test_criterion_7_inexact_speedup(tmp_path):
    s_ex, ex = run_experiment(load_preset("tm_exact"), tmp_path / "exact")
    s_in, inx = run_experiment(load_preset("tm_inexact"), tmp_path / "inexact")
    speedup = ex["iterations"] / inx["iterations"]
    rel = abs(inx["final_nodal_error"] - ex["final_nodal_error"]) / ex["final_nodal_error"]
    report(7, "inexact solves save iterations at equal error",
           s_ex == 0 and s_in == 0 and speedup >= 1.5 and rel <= 0.01,
           f"{ex['iterations']} vs {inx['iterations']} iterations (x{speedup:.2f}), "
           f"final errors differ by {100 * rel:.3f}%")


def test_criterion_8_adaptivity_efficiency(tmp_path):
    cfg = load_preset("verwer_adapt")
    t0 = time.perf_counter()
    status, summ = run_experiment(cfg, tmp_path)
    rows = read_csv(tmp_path / "adapt.csv")
    final = rows[-1]
    target = cfg.tol
    adaptive_ok = status == 0 and float(final["eta"]) <= target
    adaptive_dofs = int(final["dofs"])
    # uniform family: bisect everything i times and raise every degree by j
    sol = make_verwer()
    init = lambda m, d: l2_project_nodal(lambda x, y, z: sol.E(0, x, y, z),
                                         lambda x, y, z: sol.H(0, x, y, z), m, d)
    p0 = DegreeVector(*cfg.degrees)
    family = []
    for i in (0, 1, 2):
        for j in (0, 1, 2, 3):
            mesh = build_mesh(tuple(d * 2 ** i for d in cfg.dims))
            deg = p0.shifted(j, j, j, j)
            sp = SpaceDescriptor(mesh, set_temporal_levels(0, cfg.dt, [i] * mesh.n_elements),
                                 [deg] * mesh.n_elements)
            family.append((sp.n_unknowns, i, j, sp))
    uniform = None
    for dofs, i, j, sp in sorted(family, key=lambda f: f[0]):
        st, _ = solve_pair(sp, init, sol.J, sol.g, SolverConfig(rtol=1e-12, restart=30, max_iter=5000))
        if st.eta <= target:
            uniform = (dofs, i, j, st.eta)
            break
    ratio = adaptive_dofs / uniform[0] if uniform else 0.0
    report(8, "adaptivity beats uniform refinement in DOFs",
           adaptive_ok and uniform is not None and ratio <= 0.7,
           f"eta<={target:g}: adaptive {adaptive_dofs} DOFs (eta {float(final['eta']):.2e}), "
           f"uniform h^{uniform[1]} p+{uniform[2]} {uniform[0]} DOFs (eta {uniform[3]:.2e}), "
           f"ratio {ratio:.2f}, {time.perf_counter() - t0:.0f} s")


def test_criterion_9_basis_and_projection_invariants():
    t0 = time.perf_counter()
    checks = {}
    x, w = b1.gauss_rule(14)
    L = b1.legendre_table(12, x)
    checks["orthonormality"] = np.max(np.abs((L * w) @ L.T - np.eye(13))) < 1e-13
    ends = b1.ilegendre_table(12, np.array([0.0, 1.0]))
    checks["bubbles"] = np.max(np.abs(ends[2:])) < 1e-14
    ok = True
    for p in range(1, 13):
        D = b1.coupling_matrix(p)
        ok &= D[0, 0] == pytest.approx(-1.0) and D[0, 1] == pytest.approx(1.0)
        ok &= np.allclose(D[:, 2:], np.eye(p, p - 1, -1), atol=1e-13)
    checks["coupling"] = bool(ok)
    proj_ok = True
    for level, pt, lc, q in [(0, 2, 0, 2), (1, 1, 0, 1), (2, 3, 0, 2), (2, 2, 1, 1)]:
        P = temporal_projector(level, pt, lc, q)
        proj_ok &= np.allclose(P @ P, P, atol=1e-13) and np.allclose(P, P.T, atol=1e-13)
    checks["projectors"] = bool(proj_ok)
    rng = np.random.default_rng(0)
    mesh = build_mesh((2, 1, 1))
    sp = SpaceDescriptor(mesh, set_temporal_levels(0, 1, [2, 1]), [DegreeVector(3, 1, 1, 1)] * 2)
    init = NodalState(mesh, sp.spatial_degrees(), [rng.standard_normal((3, 2, 2, 2))] * 2,
                      [rng.standard_normal((3, 2, 2, 2))] * 2)
    U = trial_from_vector(sp, rng.standard_normal(sp.n_unknowns), init)
    checks["chaining"] = U.check_chaining()
    elapsed = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    report(9, "basis and projection invariants", not failed and elapsed < 1.0,
           f"{len(checks) - len(failed)}/{len(checks)} checks in {elapsed:.2f} s"
           + (f", failed: {', '.join(failed)}" if failed else ""))
