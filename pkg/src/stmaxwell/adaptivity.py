"""Reference-solution hp-adaptivity on one time slab.

A coarse space ``S_H`` and its uniform enrichment ``S_h`` (every element
bisected in space and time, all degrees raised by one) are solved on the
same slab.  The difference ``U_h - U_H`` gives per-element indicators; the
largest are marked, and each marked element picks the refinement
candidate with the best error decrease per added degree of freedom, where
a candidate's error is the local L2 projection defect of ``U_h``.

Per coarse element everything is a tensor product of 1D spaces on the
reference interval: a continuous temporal space over the slab and one
discontinuous space per spatial axis.  Fields are stored in those bases
with the covariant scaling already applied, so plain Gram matrices give
physical L2 norms up to the factor ``dt * |K|``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import basis1d as b1
from .fespace import (DegreeVector, SpaceDescriptor, FieldState, transfer_between_slabs,
                      trial_from_vector)
from .mesh import _children, _parent, set_temporal_levels
from .residual import SlabOperator
from .solver import SolverConfig, solve_slab

MAX_DEGREE = 10


# -- 1D building blocks ---------------------------------------------------------------

@lru_cache(maxsize=None)
def _time_space(level, degree):
    return b1.Space1D(np.linspace(0.0, 1.0, 2 ** level + 1), degree, continuous=True)


@lru_cache(maxsize=None)
def _axis_space(split, degree):
    return b1.Space1D([0.0, 0.5, 1.0] if split else [0.0, 1.0], degree)


@lru_cache(maxsize=None)
def _gram(space):
    return b1.gram(space)


@lru_cache(maxsize=None)
def _embed(src, dst):
    """Coefficients in ``dst`` of the basis of ``src`` (exact when nested)."""
    return b1.projection_matrix(src, dst)


@lru_cache(maxsize=None)
def _projector(fine, cand):
    """L2 projector onto ``cand`` written in the coefficients of ``fine``."""
    return _embed(cand, fine) @ _embed(fine, cand)


def _apply_axes(mats, T):
    """Apply one matrix per tensor axis to ``T[..., t, x, y, z]``."""
    return np.einsum("it,jx,ky,lz,...txyz->...ijkl", *mats, T, optimize=True)


def _time_gather(arr):
    """Trial array ``(n, C, pt+1, ...)`` to continuous dofs ``(C, ndofs, ...)``."""
    n, pt = arr.shape[0], arr.shape[2] - 1
    nodes = np.concatenate([arr[:, :, 0], arr[-1:, :, 1]], axis=0)  # (n+1, C, ...)
    parts = [np.moveaxis(nodes, 0, 1)]
    if pt > 1:
        bub = arr[:, :, 2:]  # (n, C, pt-1, ...)
        bub = np.moveaxis(bub, 0, 1)  # (C, n, pt-1, ...)
        parts.append(bub.reshape((bub.shape[0], n * (pt - 1)) + bub.shape[3:]))
    return np.concatenate(parts, axis=1)


def _time_scatter(T, n, pt):
    """Inverse of :func:`_time_gather`."""
    C = T.shape[0]
    rest = T.shape[2:]
    arr = np.empty((n, C, pt + 1) + rest)
    nodes = np.moveaxis(T[:, : n + 1], 1, 0)
    arr[:, :, 0] = nodes[:-1]
    arr[:, :, 1] = nodes[1:]
    if pt > 1:
        bub = T[:, n + 1:].reshape((C, n, pt - 1) + rest)
        arr[:, :, 2:] = np.moveaxis(bub, 1, 0)
    return arr


# -- spaces -------------------------------------------------------------------------

def build_fine_space(coarse, max_degree=MAX_DEGREE):
    """Bisect every element in space and time and raise all degrees by one."""
    if max(max(d.pt, *d.spatial) for d in coarse.degrees) + 1 > max_degree:
        raise ValueError(f"fine space would exceed the degree cap {max_degree}")
    mesh = coarse.mesh
    fine_mesh = mesh.refine(range(mesh.n_elements))
    levels, degrees = [], []
    for key in fine_mesh.leaves:
        e = mesh.index(_parent(key))
        levels.append(coarse.partition.levels[e] + 1)
        degrees.append(coarse.degrees[e].shifted(1, 1, 1, 1))
    return SpaceDescriptor(fine_mesh, set_temporal_levels(coarse.t0, coarse.t1, levels), degrees)


def children_of(coarse, fine):
    """Fine element ids of each coarse element's eight children, in the
    order ``dx + 2 dy + 4 dz``."""
    return [[fine.mesh.index(k) for k in _children(key)] for key in coarse.mesh.leaves]


def element_dofs(degrees, level, split=False):
    """Unknowns of one macro-element (both fields)."""
    d = degrees
    n = 6 * 2 ** level * d.pt * (d.px + 1) * (d.py + 1) * (d.pz + 1)
    return 8 * n if split else n


def space_dofs(space):
    return space.n_unknowns


# -- element tensors ----------------------------------------------------------------

def _coarse_spaces(space, e):
    d = space.degrees[e]
    return (_time_space(space.partition.levels[e], d.pt),
            *(_axis_space(False, p) for p in d.spatial))


def _fine_spaces(space, e):
    d = space.degrees[e]
    return (_time_space(space.partition.levels[e] + 1, d.pt + 1),
            *(_axis_space(True, p + 1) for p in d.spatial))


def coarse_tensor(U, e, fld):
    """``(3, t, x, y, z)`` tensor of a coarse element in its own 1D bases."""
    h = U.space.mesh.h(e)
    arr = U.blocks(fld)[e] / h[None, :, None, None, None, None]
    return _time_gather(arr)


def fine_tensor(U_h, kids, fld):
    """``(3, t, x, y, z)`` tensor of the eight children in the split 1D bases."""
    sp = U_h.space
    blocks = [U_h.blocks(fld)[f] for f in kids]
    nx, ny, nz = blocks[0].shape[3:]
    T = None
    for c, f in enumerate(kids):
        dx, dy, dz = c & 1, (c >> 1) & 1, (c >> 2) & 1
        h = sp.mesh.h(f)
        t = _time_gather(blocks[c] / h[None, :, None, None, None, None])
        if T is None:
            T = np.zeros((3, t.shape[1], 2 * nx, 2 * ny, 2 * nz))
        T[:, :, dx * nx:(dx + 1) * nx, dy * ny:(dy + 1) * ny, dz * nz:(dz + 1) * nz] = t
    return T


def embed_coarse(U_H, fine):
    """Exact representation of a coarse trial state in the fine space."""
    coarse = U_H.space
    kids_all = children_of(coarse, fine)
    E = [None] * fine.n_elements
    H = [None] * fine.n_elements
    for e, kids in enumerate(kids_all):
        src = _coarse_spaces(coarse, e)
        dst = _fine_spaces(coarse, e)
        mats = [_embed(s, d) for s, d in zip(src, dst)]
        d = coarse.degrees[e]
        n_f = 2 ** (coarse.partition.levels[e] + 1)
        nx, ny, nz = (p + 2 for p in d.spatial)
        for fld, out in (("E", E), ("H", H)):
            T = _apply_axes(mats, coarse_tensor(U_H, e, fld))
            for c, f in enumerate(kids):
                dx, dy, dz = c & 1, (c >> 1) & 1, (c >> 2) & 1
                sub = T[:, :, dx * nx:(dx + 1) * nx, dy * ny:(dy + 1) * ny, dz * nz:(dz + 1) * nz]
                arr = _time_scatter(sub, n_f, d.pt + 1)
                out[f] = arr * fine.mesh.h(f)[None, :, None, None, None, None]
    return FieldState(fine, "trial", E, H)


def _weighted_norm_sq(T, grams):
    GT = _apply_axes(grams, T)
    return float(np.sum(T * GT))


def _element_weight(space, e):
    return space.dt * space.mesh.element_jacobian(e)[1]


# -- estimate and mark ----------------------------------------------------------------

def estimate(U_h, U_H):
    """Per-element ``|U_h - U_H|`` in L2(I_n; L2(K)) and the global root sum."""
    coarse, fine = U_H.space, U_h.space
    if abs(coarse.t0 - fine.t0) > 1e-14 or abs(coarse.t1 - fine.t1) > 1e-14:
        raise ValueError("solutions live on different slabs")
    kids_all = children_of(coarse, fine)
    ind = np.zeros(coarse.n_elements)
    for e, kids in enumerate(kids_all):
        src, dst = _coarse_spaces(coarse, e), _fine_spaces(coarse, e)
        mats = [_embed(s, d) for s, d in zip(src, dst)]
        grams = [_gram(d) for d in dst]
        tot = 0.0
        for fld in ("E", "H"):
            diff = fine_tensor(U_h, kids, fld) - _apply_axes(mats, coarse_tensor(U_H, e, fld))
            tot += _weighted_norm_sq(diff, grams)
        ind[e] = math.sqrt(max(tot, 0.0) * _element_weight(coarse, e))
    return ind, float(math.sqrt(np.sum(ind ** 2)))


def mark_fixed_fraction(indicators, theta):
    """Ids of the ``ceil(theta N)`` largest indicators; ties go to lower ids."""
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    ind = np.asarray(indicators, dtype=float)
    n = int(math.ceil(theta * ind.size - 1e-12))
    order = sorted(range(ind.size), key=lambda i: (-ind[i], i))
    return sorted(order[:n])


# -- candidates ----------------------------------------------------------------------

@dataclass(frozen=True)
class Candidate:
    """Replacement space for one marked macro-element."""

    tag: str
    degrees: DegreeVector
    level: int
    split: bool = False
    dofs: int = 0
    score: float = math.nan


def _make(tag, base, level, split=False, dt=0, dx=0, dy=0, dz=0):
    d = (base.pt + dt, base.px + dx, base.py + dy, base.pz + dz)
    if d[0] < 1 or min(d[1:]) < 0 or level < 0:
        return None
    deg = DegreeVector(*d)
    return Candidate(tag, deg, level, split, element_dofs(deg, level, split))


def enumerate_candidates(space, e):
    """Keep, single degree moves, spatial bisection, temporal level moves and
    four combined enrichments.  Invalid degrees or levels are dropped."""
    d = space.degrees[e]
    lev = space.partition.levels[e]
    specs = [("keep", {})]
    for ax in ("t", "x", "y", "z"):
        for s in (1, -1):
            specs.append((f"p{ax}{'+' if s > 0 else '-'}1", {"d" + ax: s}))
    specs += [
        ("h+1", {"split": True}),
        ("lt+1", {"dl": 1}),
        ("lt-1", {"dl": -1}),
        ("h+1,pxyz+1", {"split": True, "dx": 1, "dy": 1, "dz": 1}),
        ("h+1,pt+1", {"split": True, "dt": 1}),
        ("lt+1,pt+1", {"dl": 1, "dt": 1}),
        ("pxyz+1", {"dx": 1, "dy": 1, "dz": 1}),
    ]
    out = []
    for tag, kw in specs:
        kw = dict(kw)
        dl = kw.pop("dl", 0)
        c = _make(tag, d, lev + dl, **kw)
        if c is not None:
            out.append(c)
    return out


def _candidate_spaces(cand):
    d = cand.degrees
    return (_time_space(cand.level, d.pt), *(_axis_space(cand.split, p) for p in d.spatial))


def embeddable(space, e, cand):
    d, lev = space.degrees[e], space.partition.levels[e]
    return (cand.level <= lev + 1 and cand.degrees.pt <= d.pt + 1
            and all(pc <= p + 1 for pc, p in zip(cand.degrees.spatial, d.spatial)))


def projection_defect(T, space, e, cand):
    """Coefficients of ``T - Pi T`` for the candidate on element ``e``."""
    fine = _fine_spaces(space, e)
    Q = [_projector(f, c) for f, c in zip(fine, _candidate_spaces(cand))]
    return T - _apply_axes(Q, T)


def score_candidate(U_h, coarse, e, cand, tensors=None):
    """Unsquared L2(I_n; L2(K)) norm of the local projection defect of the
    fine solution, or ``None`` when the candidate does not embed."""
    if not embeddable(coarse, e, cand):
        return None
    if tensors is None:
        kids = children_of(coarse, U_h.space)[e]
        tensors = [fine_tensor(U_h, kids, f) for f in ("E", "H")]
    grams = [_gram(s) for s in _fine_spaces(coarse, e)]
    tot = sum(_weighted_norm_sq(projection_defect(T, coarse, e, cand), grams) for T in tensors)
    return math.sqrt(max(tot, 0.0) * _element_weight(coarse, e))


def select_candidate(candidates, eta, dofs):
    """Best error decrease per added DOF among strictly improving candidates;
    ``None`` when nothing improves."""
    best, best_key = None, None
    for n, c in enumerate(candidates):
        if c.score is None or not math.isfinite(c.score) or not c.score < eta:
            continue
        ddof = max(c.dofs - dofs, 1)
        key = ((c.score - eta) / ddof, ddof, n)
        if best_key is None or key < best_key:
            best, best_key = c, key
    return best


def choose_refinements(U_h, coarse, marked):
    """Scored candidates and the selection for each marked element."""
    kids_all = children_of(coarse, U_h.space)
    chosen, scored = {}, {}
    for e in marked:
        tensors = [fine_tensor(U_h, kids_all[e], f) for f in ("E", "H")]
        cands = []
        for c in enumerate_candidates(coarse, e):
            s = score_candidate(U_h, coarse, e, c, tensors)
            if s is not None:
                cands.append(replace(c, score=s))
        keep = next(c for c in cands if c.tag == "keep")
        pick = select_candidate(cands, keep.score, keep.dofs)
        scored[e] = cands
        chosen[e] = pick if pick is not None else keep
    return chosen, scored


def apply_candidates(coarse, chosen):
    """New coarse space with the chosen candidates committed.

    Spatial bisection may trigger 2:1 closure; closure elements inherit their
    parent's degrees and temporal level.
    """
    mesh = coarse.mesh
    split = [e for e, c in chosen.items() if c.split]
    new_mesh = mesh.refine(split) if split else mesh
    levels, degrees = [], []
    for key in new_mesh.leaves:
        k = key
        while k not in mesh:
            k = _parent(k)
        e = mesh.index(k)
        c = chosen.get(e)
        if c is None:
            levels.append(coarse.partition.levels[e])
            degrees.append(coarse.degrees[e])
        else:
            levels.append(c.level)
            degrees.append(c.degrees)
    return SpaceDescriptor(new_mesh, set_temporal_levels(coarse.t0, coarse.t1, levels), degrees)


# -- the adaptive loop ----------------------------------------------------------------

@dataclass
class AdaptState:
    coarse: SpaceDescriptor
    fine: SpaceDescriptor
    U_H: FieldState
    U_h: FieldState
    indicators: np.ndarray
    eta: float


@dataclass
class AdaptResult:
    state: AdaptState
    rounds: int
    converged: bool
    log: list = field(default_factory=list)
    iterations: int = 0

    @property
    def space(self):
        return self.state.coarse

    @property
    def eta(self):
        return self.state.eta

    @property
    def dofs(self):
        return self.state.coarse.n_unknowns


def solve_on(space, init, source=None, boundary=None, config=None, dissipation=0.0, x0=None):
    """Solve one slab on ``space`` from nodal data ``init``.

    ``init`` is a NodalState on any nested space, or a callable
    ``init(mesh, spatial_degrees) -> NodalState`` projecting exact data.
    """
    cfg = config or SolverConfig(rtol=1e-12, restart=30)
    if callable(init):
        init = init(space.mesh, space.spatial_degrees())
    elif not (init.mesh.same_as(space.mesh)
            and [tuple(d) for d in init.degrees] == space.spatial_degrees()):
        init = transfer_between_slabs(init, space.mesh, space.spatial_degrees())
    op = SlabOperator(space, dissipation)
    b = op.rhs(init, source, boundary)
    x, rep = solve_slab(op, b, cfg, x0=x0)
    return trial_from_vector(space, x, init), rep


def solve_pair(coarse, init, source=None, boundary=None, config=None, dissipation=0.0):
    """Coarse and fine solves; the fine solve starts from the embedded coarse
    solution.  Returns ``(AdaptState, total iterations)``."""
    U_H, rep_H = solve_on(coarse, init, source, boundary, config, dissipation)
    fine = build_fine_space(coarse)
    x0 = embed_coarse(U_H, fine).to_vector()
    U_h, rep_h = solve_on(fine, init, source, boundary, config, dissipation, x0=x0)
    ind, eta = estimate(U_h, U_H)
    return AdaptState(coarse, fine, U_H, U_h, ind, eta), rep_H.iterations + rep_h.iterations


def adapt_slab(coarse, init, tol, theta=0.3, max_rounds=10, source=None, boundary=None,
               config=None, dissipation=0.0):
    """SOLVE, ESTIMATE, MARK, REFINE on one slab until ``eta <= tol``.

    ``coarse`` is the starting space on the slab and ``init`` the nodal
    state at its start (or a projector, see :func:`solve_on`).  A round
    whose estimate exceeds the previous one is rolled back and retried once
    with every element marked; if that also fails the loop stops.  Accepted
    rounds therefore never increase eta.
    """
    state, its = solve_pair(coarse, init, source, boundary, config, dissipation)
    log = []
    rounds = 1
    while True:
        row = {"round": rounds, "eta": state.eta, "dofs": state.coarse.n_unknowns, "choices": ""}
        log.append(row)
        if state.eta <= tol:
            return AdaptResult(state, rounds, True, log, its)
        if rounds >= max_rounds:
            return AdaptResult(state, rounds, False, log, its)
        accepted = None
        # a rejected round is retried once with every element marked
        for th in (theta, 1.0) if theta < 1 else (theta,):
            marked = mark_fixed_fraction(state.indicators, th)
            chosen, _ = choose_refinements(state.U_h, state.coarse, marked)
            tags = " ".join(f"{e}:{c.tag}" for e, c in sorted(chosen.items()) if c.tag != "keep")
            if not tags:
                break
            new_space = apply_candidates(state.coarse, chosen)
            new_state, n = solve_pair(new_space, init, source, boundary, config, dissipation)
            its += n
            if new_state.eta <= state.eta:
                row["choices"] = tags
                accepted = new_state
                break
            log.append({"round": rounds, "eta": new_state.eta, "dofs": new_space.n_unknowns,
                        "choices": "rejected " + tags})
        if accepted is None:
            return AdaptResult(state, rounds, False, log, its)
        state = accepted
        rounds += 1


def write_adapt_log(rows, path, slab=None):
    """CSV with round, eta, DOF count and the chosen candidate per element."""
    cols = (["slab"] if slab is not None else []) + ["round", "eta", "dofs", "choices"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow(([slab] if slab is not None else [])
                       + [r["round"], f"{r['eta']:.12e}", r["dofs"], r["choices"]])
