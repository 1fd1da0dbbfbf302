"""Slab-by-slab driver, energy and error diagnostics, analytic fixtures."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import basis1d as b1
from .fespace import (NodalState, l2_project_nodal, nodal_energy, transfer_between_slabs,
                      trial_from_vector)
from .residual import SlabOperator
from .solver import BudgetTracker, SolverConfig, solve_slab


def _zero(t, x, y, z):
    return np.zeros((3,) + np.broadcast(t, x, y, z).shape)


@dataclass
class AnalyticSolution:
    """Closed-form fields with their time derivatives and curls.

    All callables take broadcastable ``(t, x, y, z)`` and return arrays of
    shape ``(3, ...)``.  ``J`` is the volume source and ``g`` the boundary
    datum whose tangential trace is imposed.
    """

    tag: str
    E: Callable
    H: Callable
    dE: Callable
    dH: Callable
    curlE: Callable
    curlH: Callable
    J: Optional[Callable] = None
    g: Optional[Callable] = None
    eps: float = 1.0
    mu: float = 1.0
    omega: float = float("nan")
    box: tuple = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))

    def self_check(self, n=100, seed=0):
        """Max pointwise defect of both Maxwell equations at random points."""
        rng = np.random.default_rng(seed)
        lo, hi = (np.asarray(v) for v in self.box)
        p = lo + (hi - lo) * rng.random((n, 3))
        t = rng.random(n)
        x, y, z = p.T
        J = self.J(t, x, y, z) if self.J is not None else 0.0
        r1 = self.eps * self.dE(t, x, y, z) - self.curlH(t, x, y, z) - J
        r2 = self.mu * self.dH(t, x, y, z) + self.curlE(t, x, y, z)
        return float(max(np.abs(r1).max(), np.abs(r2).max()))

    def energy(self, t, nq=12):
        """Continuous energy by tensor Gauss quadrature over the box."""
        lo, hi = (np.asarray(v, dtype=float) for v in self.box)
        x, w = b1.gauss_rule(nq)
        pts = [lo[a] + (hi[a] - lo[a]) * x for a in range(3)]
        X, Y, Z = np.meshgrid(*pts, indexing="ij")
        W = np.einsum("a,b,c->abc", w, w, w) * np.prod(hi - lo)
        E, H = self.E(t, X, Y, Z), self.H(t, X, Y, Z)
        return 0.5 * float(np.sum(W * (self.eps * (E ** 2).sum(0) + self.mu * (H ** 2).sum(0))))


def make_tm_mode(m=1, n=1, Lz=0.2, eps=1.0, mu=1.0):
    """Transverse-magnetic cavity mode in ``[0,1]^2 x [0,Lz]`` with PEC walls."""
    if m < 1 or n < 1:
        raise ValueError("mode numbers must be positive")
    pi = math.pi
    omega = pi * math.sqrt(m * m + n * n) / math.sqrt(eps * mu)
    kx, ky = m * pi, n * pi

    def E(t, x, y, z):
        v = np.sin(kx * x) * np.sin(ky * y) * np.cos(omega * t) + 0 * z
        return np.stack([0 * v, 0 * v, v])

    def dE(t, x, y, z):
        v = -omega * np.sin(kx * x) * np.sin(ky * y) * np.sin(omega * t) + 0 * z
        return np.stack([0 * v, 0 * v, v])

    def curlE(t, x, y, z):
        c = np.cos(omega * t) + 0 * z
        return np.stack([ky * np.sin(kx * x) * np.cos(ky * y) * c,
                         -kx * np.cos(kx * x) * np.sin(ky * y) * c, 0 * c * x * y])

    def H(t, x, y, z):
        s = np.sin(omega * t) / (mu * omega) + 0 * z
        return np.stack([-ky * np.sin(kx * x) * np.cos(ky * y) * s,
                         kx * np.cos(kx * x) * np.sin(ky * y) * s, 0 * s * x * y])

    def dH(t, x, y, z):
        c = np.cos(omega * t) / mu + 0 * z
        return np.stack([-ky * np.sin(kx * x) * np.cos(ky * y) * c,
                         kx * np.cos(kx * x) * np.sin(ky * y) * c, 0 * c * x * y])

    def curlH(t, x, y, z):
        s = np.sin(omega * t) / (mu * omega) + 0 * z
        v = -(kx * kx + ky * ky) * np.sin(kx * x) * np.sin(ky * y) * s
        return np.stack([0 * v, 0 * v, v])

    return AnalyticSolution(f"tm_mode({m},{n})", E, H, dE, dH, curlE, curlH, None, None,
                            eps, mu, omega, ((0.0, 0.0, 0.0), (1.0, 1.0, Lz)))


def make_verwer():
    """Polynomial-in-space, exponential-in-time solution on the unit cube
    with a matching volume source; its tangential boundary trace vanishes."""

    def f(x, z):
        return x * (x - 1) * z * (1 - z)

    def E(t, x, y, z):
        v = np.exp(t) * f(x, z) + 0 * y
        return np.stack([0 * v, v, 0 * v])

    def H(t, x, y, z):
        e = np.exp(t) + 0 * y
        return np.stack([e * x * (x - 1) * (1 - 2 * z), 0 * e * x * z, -e * (2 * x - 1) * z * (1 - z)])

    def curlE(t, x, y, z):
        e = np.exp(t) + 0 * y
        return np.stack([-e * x * (x - 1) * (1 - 2 * z), 0 * e * x * z, e * (2 * x - 1) * z * (1 - z)])

    def curlH(t, x, y, z):
        e = np.exp(t) + 0 * y
        return np.stack([0 * e * x * z, e * (-2 * x * (x - 1) + 2 * z * (1 - z)), 0 * e * x * z])

    def J(t, x, y, z):
        return E(t, x, y, z) - curlH(t, x, y, z)

    return AnalyticSolution("verwer", E, H, E, H, curlE, curlH, J, E, 1.0, 1.0)


def zero_solution():
    return AnalyticSolution("zero", _zero, _zero, _zero, _zero, _zero, _zero)


# -- diagnostics ---------------------------------------------------------------------

def energy(nodal):
    return nodal_energy(nodal)


def _element_grid(mesh, e, nq):
    o, h = mesh.origin(e), mesh.h(e)
    x, w = b1.gauss_rule(nq)
    pts = [o[a] + h[a] * x for a in range(3)]
    X, Y, Z = np.meshgrid(*pts, indexing="ij")
    W = np.einsum("a,b,c->abc", w, w, w) * np.prod(h)
    return x, X, Y, Z, W, h


def nodal_error(nodal, analytic, t, nq=None):
    """L2(Omega) error of (E, H) at time ``t``."""
    mesh = nodal.mesh
    tot = 0.0
    for e in range(mesh.n_elements):
        q = nq or max(nodal.degrees[e]) + 3
        x, X, Y, Z, W, h = _element_grid(mesh, e, q)
        for blk, f in ((nodal.E[e], analytic.E), (nodal.H[e], analytic.H)):
            tabs = [b1.legendre_table(blk.shape[1 + a] - 1, x) for a in range(3)]
            v = np.einsum("cijk,ix,jy,kz->cxyz", blk, *tabs, optimize=True) / h[:, None, None, None]
            tot += float(np.sum(W * ((v - f(t, X, Y, Z)) ** 2).sum(0)))
    return math.sqrt(tot)


def slab_error_sq(U, analytic, nq=None):
    """Squared L2(I_n; L2(Omega)) error of a trial state on its slab."""
    sp, mesh = U.space, U.space.mesh
    tot = 0.0
    for e in range(sp.n_elements):
        d = sp.degrees[e]
        q = nq or max(d.spatial) + 3
        x, X, Y, Z, W, h = _element_grid(mesh, e, q)
        tx, tw = b1.gauss_rule(nq or d.pt + 3)
        lt = b1.ilegendre_table(d.pt, tx)
        tabs = [b1.legendre_table(p, x) for p in d.spatial]
        tau = sp.tau(e)
        for k, (ta, _) in enumerate(sp.partition.sub_intervals(e)):
            for blk, f in ((U.E[e][k], analytic.E), (U.H[e][k], analytic.H)):
                v = np.einsum("cmijk,mq,ix,jy,kz->qcxyz", blk, lt, *tabs, optimize=True)
                v = v / h[None, :, None, None, None]
                for qi, t in enumerate(ta + tau * tx):
                    tot += tau * tw[qi] * float(np.sum(W * ((v[qi] - f(t, X, Y, Z)) ** 2).sum(0)))
    return tot


def error_norms(U, analytic, nq=None):
    """``(nodal error at slab end, squared slab-accumulated error)``."""
    return nodal_error(U.end(), analytic, U.space.t1, nq), slab_error_sq(U, analytic, nq)


# -- time marching ---------------------------------------------------------------------

@dataclass
class RunState:
    slab: int
    time: float
    space: object
    nodal: NodalState
    eta_parts: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    dual_norms: list = field(default_factory=list)
    acc_error_sq: float = 0.0
    last: object = None

    @property
    def acc_error(self):
        return math.sqrt(self.acc_error_sq)


def initial_state(space, analytic, t0=0.0):
    """Projected initial data and the matching run state."""
    fE = lambda x, y, z: analytic.E(t0, x, y, z)
    fH = lambda x, y, z: analytic.H(t0, x, y, z)
    nodal = l2_project_nodal(fE, fH, space.mesh, space.spatial_degrees())
    st = RunState(0, t0, space, nodal)
    st.energy.append((t0, nodal_energy(nodal)))
    st.errors.append((t0, nodal_error(nodal, analytic, t0), 0.0))
    return st


def advance_slab(state, space, dt, solver_config, analytic, dissipation=0.0, budget=None,
                 track_errors=True, x0=None):
    """Solve the next slab on ``space`` and append diagnostics."""
    t0 = state.time
    sp = space.with_slab(t0, t0 + dt)
    init = state.nodal
    if not (init.mesh.same_as(sp.mesh) and [tuple(d) for d in init.degrees] == sp.spatial_degrees()):
        init = transfer_between_slabs(init, sp.mesh, sp.spatial_degrees())
    op = SlabOperator(sp, dissipation)
    b = op.rhs(init, analytic.J, analytic.g)
    x, rep = solve_slab(op, b, solver_config, x0=x0, budget=budget)
    U = trial_from_vector(sp, x, init)
    nodal = U.end()
    st = RunState(state.slab + 1, t0 + dt, sp, nodal, list(state.eta_parts), list(state.energy),
                  list(state.errors), list(state.iterations), list(state.dual_norms),
                  state.acc_error_sq, U)
    st.energy.append((st.time, nodal_energy(nodal)))
    st.iterations.append(rep.iterations)
    st.dual_norms.append((rep.dual_E, rep.dual_H))
    st.eta_parts.append(rep.eta_part)
    if track_errors:
        nod, acc = error_norms(U, analytic)
        st.acc_error_sq += acc
        st.errors.append((st.time, nod, st.acc_error))
    st.report = rep
    return st


def march(space, analytic, n_slabs, dt, solver_config=None, dissipation=0.0, eta_target=0.0,
          track_errors=True, initial=None, t0=0.0, on_slab=None):
    """Run ``n_slabs`` slabs on a fixed space; returns the final RunState."""
    cfg = solver_config or SolverConfig()
    st = initial_state(space, analytic, t0) if initial is None else initial
    budget = None
    if cfg.mode == "inexact" or eta_target > 0:
        mesh = space.mesh
        eps_min = min(mesh.eps(e) for e in range(mesh.n_elements))
        mu_min = min(mesh.mu(e) for e in range(mesh.n_elements))
        budget = BudgetTracker(eta_target or cfg.eta_target, n_slabs, dt, t0 + n_slabs * dt,
                               eps_min, mu_min)
    for _ in range(n_slabs):
        st = advance_slab(st, space, dt, cfg, analytic, dissipation, budget, track_errors)
        if on_slab is not None:
            on_slab(st)
    st.budget = budget
    return st


def default_dt(mesh, p_max):
    """``h_min / (2 p + 1)``."""
    hmin = min(float(np.min(mesh.h(e))) for e in range(mesh.n_elements))
    return hmin / (2 * p_max + 1)
