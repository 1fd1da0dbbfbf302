"""Restarted GMRES in the dual norm, iteration-error bound, inexact control.

The slab system ``A u = b`` is preconditioned by the exact time-derivative
operator ``P``.  GMRES runs on residual-space vectors with the inner product
``<a, b> = a^T G^{-1} b`` (``G`` the diagonal Gram matrix of the test
basis) and the operator ``A P^{-1}``.  This is the left-preconditioned
method in the matching ``P``-weighted inner product written in residual
coordinates, and the quantity it minimises is exactly the dual norm of the
slab residual, which is what the iteration-error bound consumes.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np


@dataclass
class SolverConfig:
    restart: int = 10
    max_iter: int = 2000
    rtol: float = 1e-10
    mode: str = "exact"  # "exact" or "inexact"
    eta_target: float = 0.0  # total iteration-error budget for inexact mode

    def __post_init__(self):
        if self.restart < 1:
            raise ValueError("restart must be at least 1")
        if self.mode not in ("exact", "inexact"):
            raise ValueError("mode must be 'exact' or 'inexact'")
        if self.rtol <= 0 or self.max_iter < 1:
            raise ValueError("rtol and max_iter must be positive")
        if self.eta_target < 0:
            raise ValueError("eta_target must be non-negative")


@dataclass
class IterationReport:
    iterations: int = 0
    dual_E: float = 0.0
    dual_H: float = 0.0
    rhs_norm: float = 0.0
    eta_part: float = 0.0
    wall_time: float = 0.0
    converged: bool = True
    history: list = field(default_factory=list)
    cycles: list = field(default_factory=list)
    residual: object = field(default=None, repr=False)

    @property
    def dual(self):
        return math.hypot(self.dual_E, self.dual_H)


def gmres_restarted(matvec, precondition, b, weights, x0=None, restart=10, max_iter=2000,
                    atol=0.0, rtol=1e-10):
    """Solve ``A x = b`` with restarted GMRES (modified Gram-Schmidt).

    ``weights`` holds the diagonal of ``G^{-1}``; residual norms are
    ``sqrt(r^T G^{-1} r)``.  Stops once the norm is at most
    ``max(atol, rtol * |b|)``.  Returns ``(x, report)``.
    """
    t_start = time.perf_counter()

    def norm(v):
        return math.sqrt(float(np.dot(v * weights, v)))

    bnorm = norm(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    rep = IterationReport(rhs_norm=bnorm)
    target = max(atol, rtol * bnorm)
    r = b - matvec(x) if x0 is not None else b.copy()
    beta = norm(r)
    rep.history.append(beta)
    its = 0
    while beta > target and its < max_iter:
        m = min(restart, max_iter - its)
        V = np.zeros((m + 1, b.size))
        Hm = np.zeros((m + 1, m))
        cs, sn = np.zeros(m), np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        cycle = [beta]
        k_used = 0
        for j in range(m):
            w = np.array(matvec(precondition(V[j])), dtype=float)  # never alias V
            its += 1
            for i in range(j + 1):
                Hm[i, j] = float(np.dot(w * weights, V[i]))
                w -= Hm[i, j] * V[i]
            Hm[j + 1, j] = norm(w)
            breakdown = Hm[j + 1, j] <= 1e-14 * max(abs(Hm[j, j]), 1e-300)
            if not breakdown:
                V[j + 1] = w / Hm[j + 1, j]
            for i in range(j):
                t = cs[i] * Hm[i, j] + sn[i] * Hm[i + 1, j]
                Hm[i + 1, j] = -sn[i] * Hm[i, j] + cs[i] * Hm[i + 1, j]
                Hm[i, j] = t
            d = math.hypot(Hm[j, j], Hm[j + 1, j])
            cs[j], sn[j] = (1.0, 0.0) if d == 0 else (Hm[j, j] / d, Hm[j + 1, j] / d)
            Hm[j, j] = d
            Hm[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            k_used = j + 1
            cycle.append(abs(g[j + 1]))
            rep.history.append(abs(g[j + 1]))
            if abs(g[j + 1]) <= target or breakdown:
                break
        y = np.linalg.solve(np.triu(Hm[:k_used, :k_used]), g[:k_used]) if k_used else np.zeros(0)
        x = x + precondition(y @ V[:k_used])
        rep.cycles.append(cycle)
        r = b - matvec(x)
        beta_new = norm(r)
        stalled = beta_new >= beta * (1 - 1e-12)
        beta = beta_new
        if stalled:
            break
    rep.iterations = its
    rep.converged = beta <= target
    rep.wall_time = time.perf_counter() - t_start
    rep.history.append(beta)
    rep.residual = r
    return x, rep


def dual_norm(op, r):
    """``(|R_E|, |R_H|)`` in the dual of the test space (unweighted L2)."""
    return op.dual_norms(r)


def bound_weights(dt, t_final, eps_min, mu_min):
    aE = 2 * t_final / eps_min + dt ** 2 / (2 * t_final * eps_min)
    aH = 2 * t_final / mu_min + dt ** 2 / (2 * t_final * mu_min)
    return aE, aH


def iteration_error_bound(dual_norms, dt, t_final, eps_min, mu_min, local_time_refinement=False):
    """Guaranteed bound on the end-time iteration error.

    ``dual_norms`` is a sequence of per-slab ``(|R_E|, |R_H|)``.  Valid only
    for uniform temporal degree and no local time refinement.
    """
    if local_time_refinement:
        raise ValueError("iteration-error bound requires uniform temporal refinement and degree")
    aE, aH = bound_weights(dt, t_final, eps_min, mu_min)
    s = sum(aE * rE ** 2 + aH * rH ** 2 for rE, rH in dual_norms)
    return math.sqrt(4 * s)


@dataclass
class BudgetTracker:
    """Equal split of the remaining squared budget over the remaining slabs."""

    eta_target: float
    n_slabs: int
    dt: float
    t_final: float
    eps_min: float
    mu_min: float
    used: float = 0.0
    done: int = 0

    def slab_target(self):
        """Combined dual-norm target for the next slab."""
        remaining = max(self.n_slabs - self.done, 1)
        share = max(self.eta_target ** 2 - self.used, 0.0) / remaining
        aE, aH = bound_weights(self.dt, self.t_final, self.eps_min, self.mu_min)
        return math.sqrt(share / (4 * max(aE, aH)))

    def record(self, rE, rH):
        aE, aH = bound_weights(self.dt, self.t_final, self.eps_min, self.mu_min)
        part = 4 * (aE * rE ** 2 + aH * rH ** 2)
        self.used += part
        self.done += 1
        return part

    @property
    def eta(self):
        return math.sqrt(self.used)


def solve_slab(op, b, config, x0=None, budget=None):
    """Solve one slab system.

    Exact mode iterates to a dual norm of ``rtol * |b|``.  Inexact mode uses
    the slab's share of the iteration-error budget as an absolute target
    (never tighter than the exact-mode tolerance).  Warm starts default to
    ``P^{-1} b``.
    """
    w = 1.0 / op.gram_vector
    if x0 is None:
        x0 = op.precondition(b)
    atol = 0.0
    rtol = config.rtol
    if config.mode == "inexact" and budget is not None and budget.eta_target > 0:
        atol = budget.slab_target()
    x, rep = gmres_restarted(op.matvec, op.precondition, b, w, x0=x0, restart=config.restart,
                             max_iter=config.max_iter, atol=atol, rtol=rtol)
    r = rep.residual
    rep.dual_E, rep.dual_H = op.dual_norms(r)
    if budget is not None:
        rep.eta_part = budget.record(rep.dual_E, rep.dual_H)
    return x, rep
