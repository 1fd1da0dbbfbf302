"""Octree brick meshes, dyadic temporal partitions and face topology.

Elements are leaves of octrees rooted at the cells of a coarse Cartesian
grid.  A leaf is addressed by ``(level, ix, iy, iz)`` where the integer
coordinates count cells of size ``coarse_h / 2**level`` from the box origin.
Neighbouring leaves differ by at most one level across faces (2:1 balance).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

AXES = (0, 1, 2)


def tangential_axes(axis):
    return tuple(a for a in AXES if a != axis)


def _sort_key(key):
    L, ix, iy, iz = key
    coarse = (ix >> L, iy >> L, iz >> L)
    path = []
    for lev in range(L - 1, -1, -1):
        path.append(((ix >> lev) & 1) + 2 * ((iy >> lev) & 1) + 4 * ((iz >> lev) & 1))
    return coarse[::-1], tuple(path)


def _children(key):
    L, ix, iy, iz = key
    return [(L + 1, 2 * ix + dx, 2 * iy + dy, 2 * iz + dz)
            for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)]


def _parent(key):
    L, ix, iy, iz = key
    return (L - 1, ix >> 1, iy >> 1, iz >> 1)


class SpatialMesh:
    """Leaf set of a forest of octrees over a box.

    ``eps`` and ``mu`` are given per coarse cell and inherited by all
    descendants, so materials are element-wise constant on every mesh.
    """

    def __init__(self, dims, lo, hi, eps, mu, leaves=None):
        self.dims = tuple(int(d) for d in dims)
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        if any(d <= 0 for d in self.dims) or np.any(self.hi <= self.lo):
            raise ValueError("mesh needs positive dims and a non-degenerate box")
        self.eps_coarse = np.broadcast_to(np.asarray(eps, dtype=float), self.dims).copy()
        self.mu_coarse = np.broadcast_to(np.asarray(mu, dtype=float), self.dims).copy()
        if np.any(self.eps_coarse <= 0):
            raise ValueError("epsilon must be positive")
        if np.any(self.mu_coarse <= 0):
            raise ValueError("mu must be positive")
        self.coarse_h = (self.hi - self.lo) / np.array(self.dims)
        if leaves is None:
            leaves = [(0, i, j, k) for k in range(self.dims[2])
                      for j in range(self.dims[1]) for i in range(self.dims[0])]
        self.leaves = tuple(sorted(set(leaves), key=_sort_key))
        self._index = {k: n for n, k in enumerate(self.leaves)}
        self._faces = None

    # -- element geometry -------------------------------------------------
    @property
    def n_elements(self):
        return len(self.leaves)

    def index(self, key):
        return self._index[key]

    def __contains__(self, key):
        return key in self._index

    def h(self, e):
        L = self.leaves[e][0]
        return self.coarse_h / 2 ** L

    def origin(self, e):
        L, ix, iy, iz = self.leaves[e]
        return self.lo + np.array([ix, iy, iz]) * self.coarse_h / 2 ** L

    def level(self, e):
        return self.leaves[e][0]

    def _coarse_cell(self, e):
        L, ix, iy, iz = self.leaves[e]
        return ix >> L, iy >> L, iz >> L

    def eps(self, e):
        return float(self.eps_coarse[self._coarse_cell(e)])

    def mu(self, e):
        return float(self.mu_coarse[self._coarse_cell(e)])

    def element_jacobian(self, e):
        """Diagonal of DF and the determinant |J| for element ``e``."""
        h = self.h(e)
        return h.copy(), float(np.prod(h))

    def centers(self):
        return np.array([self.origin(e) + 0.5 * self.h(e) for e in range(self.n_elements)])

    def locate(self, points):
        """Element index containing each physical point."""
        pts = np.atleast_2d(points)
        out = np.empty(len(pts), dtype=int)
        maxL = max(k[0] for k in self.leaves)
        for n, x in enumerate(pts):
            rel = (x - self.lo) / self.coarse_h
            for L in range(maxL + 1):
                idx = np.floor(rel * 2 ** L).astype(int)
                idx = np.minimum(idx, np.array(self.dims) * 2 ** L - 1)
                key = (L, *map(int, idx))
                if key in self._index:
                    out[n] = self._index[key]
                    break
            else:
                raise ValueError(f"point {x} outside mesh")
        return out

    # -- refinement ---------------------------------------------------------
    def _leaf_containing(self, L, idx):
        for lev in range(L, -1, -1):
            shift = L - lev
            key = (lev, idx[0] >> shift, idx[1] >> shift, idx[2] >> shift)
            if key in self._index:
                return key
        return None

    def _in_domain(self, L, idx):
        return all(0 <= idx[a] < self.dims[a] * 2 ** L for a in AXES)

    def _balance_violations(self):
        bad = set()
        for key in self.leaves:
            L = key[0]
            if L < 2:
                continue
            for axis in AXES:
                for d in (-1, 1):
                    q = list(key[1:])
                    q[axis] += d
                    if not self._in_domain(L, q):
                        continue
                    leaf = self._leaf_containing(L, q)
                    if leaf is not None and leaf[0] <= L - 2:
                        bad.add(leaf)
        return bad

    def is_balanced(self):
        return not self._balance_violations()

    def _with_leaves(self, leaves):
        return SpatialMesh(self.dims, self.lo, self.hi, self.eps_coarse, self.mu_coarse, leaves)

    def refine(self, elements):
        """Isotropically refine the given element ids, plus 2:1 closure."""
        leaves = set(self.leaves)
        for e in elements:
            key = self.leaves[e]
            leaves.discard(key)
            leaves.update(_children(key))
        mesh = self._with_leaves(leaves)
        while True:
            bad = mesh._balance_violations()
            if not bad:
                return mesh
            leaves = set(mesh.leaves)
            for key in bad:
                leaves.discard(key)
                leaves.update(_children(key))
            mesh = self._with_leaves(leaves)

    def derefine(self, parents):
        """Merge complete sibling octets back into their parents.

        ``parents`` are parent keys ``(level, ix, iy, iz)``.
        """
        leaves = set(self.leaves)
        for p in parents:
            kids = _children(tuple(p))
            if p[0] < 0 or not all(k in leaves for k in kids):
                raise ValueError(f"{p} is not the parent of a complete leaf octet")
            leaves.difference_update(kids)
            leaves.add(tuple(p))
        mesh = self._with_leaves(leaves)
        if not mesh.is_balanced():
            raise ValueError("derefinement would violate 2:1 balance")
        return mesh

    def parent_key(self, e):
        key = self.leaves[e]
        return _parent(key) if key[0] > 0 else None

    # -- faces --------------------------------------------------------------
    def faces(self):
        if self._faces is None:
            self._faces = build_faces(self)
        return self._faces

    def check(self):
        """Assert the structural invariants; returns True."""
        vol = sum(self.element_jacobian(e)[1] for e in range(self.n_elements))
        total = float(np.prod(self.hi - self.lo))
        assert abs(vol - total) <= 1e-12 * total, "elements do not tile the box"
        assert self.is_balanced(), "mesh is not 2:1 balanced"
        assert all(self.eps(e) > 0 and self.mu(e) > 0 for e in range(self.n_elements))
        return True

    def same_as(self, other):
        return self.leaves == other.leaves and self.dims == other.dims

    def dump(self, levels=None):
        """Plain-text listing of elements and faces for debugging."""
        lines = [f"# elements {self.n_elements}"]
        for e in range(self.n_elements):
            lev = 0 if levels is None else levels[e]
            o, h = self.origin(e), self.h(e)
            lines.append(f"E {e} " + " ".join(f"{v:.12g}" for v in (*o, *h))
                         + f" {self.eps(e):.12g} {self.mu(e):.12g} {lev}")
        fl = self.faces()
        lines.append(f"# faces {len(fl)}")
        for f in fl:
            lines.append(f"F {f.kind} {f.e1} {f.e2} {f.axis} {f.sign} "
                         + " ".join(f"{v:.12g}" for v in f.rect) + f" {int(f.conforming)}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Face:
    """A spatial face: the overlap of one side of ``e1`` with one side of
    ``e2`` (interior) or with the domain boundary (``e2 == -1``).

    ``sign`` is the orientation of e1's outward normal along ``axis``; e2's
    normal is the opposite.  ``rect`` holds the physical overlap
    ``(lo_t1, hi_t1, lo_t2, hi_t2)`` in the two tangential axes.
    ``ref[a]`` is the overlap in side ``a``'s reference coordinates per
    tangential axis and ``maps[(a, b)]`` the per-axis ``(s, b)`` data of the
    affine map from side ``a`` to side ``b`` reference coordinates.
    """

    kind: str
    e1: int
    e2: int
    axis: int
    sign: int
    rect: tuple
    ref: tuple = field(default=())
    maps: dict = field(default_factory=dict, compare=False)
    conforming: bool = True

    @property
    def sides(self):
        return (self.e1,) if self.e2 < 0 else (self.e1, self.e2)

    def normal_sign(self, a):
        return self.sign if a == 0 else -self.sign

    def endpoint(self, a):
        """Reference coordinate (0 or 1) of the face along ``axis`` for side a."""
        return 1 if self.normal_sign(a) > 0 else 0

    def area(self):
        r = self.rect
        return (r[1] - r[0]) * (r[3] - r[2])


def _ref_interval(lo, hi, origin, h):
    a = (lo - origin) / h
    b = (hi - origin) / h
    a = 0.0 if abs(a) < 1e-13 else (1.0 if abs(a - 1) < 1e-13 else a)
    b = 0.0 if abs(b) < 1e-13 else (1.0 if abs(b - 1) < 1e-13 else b)
    return (a, b)


def _make_face(mesh, e1, e2, axis, sign):
    t = tangential_axes(axis)
    o1, h1 = mesh.origin(e1), mesh.h(e1)
    if e2 < 0:
        rect = (o1[t[0]], o1[t[0]] + h1[t[0]], o1[t[1]], o1[t[1]] + h1[t[1]])
        ref = (((0.0, 1.0), (0.0, 1.0)),)
        return Face("boundary", e1, -1, axis, sign, rect, ref, {(0, 0): ((1.0, 0.0), (1.0, 0.0))}, True)
    o2, h2 = mesh.origin(e2), mesh.h(e2)
    rect = []
    for a in t:
        lo = max(o1[a], o2[a])
        hi = min(o1[a] + h1[a], o2[a] + h2[a])
        rect += [lo, hi]
    org, hs = (o1, o2), (h1, h2)
    ref = tuple(tuple(_ref_interval(rect[2 * n], rect[2 * n + 1], org[s][a], hs[s][a])
                      for n, a in enumerate(t)) for s in (0, 1))
    maps = {}
    for sa in (0, 1):
        for sb in (0, 1):
            per = []
            for a in t:
                if sa == sb:
                    per.append((1.0, 0.0))
                else:
                    s = hs[sa][a] / hs[sb][a]
                    b = (org[sa][a] - org[sb][a]) / hs[sb][a]
                    if abs(s - 1) < 1e-13 and abs(b) < 1e-13:
                        s, b = 1.0, 0.0
                    per.append((s, b))
            maps[(sa, sb)] = tuple(per)
    conforming = all(r == (0.0, 1.0) for side in ref for r in side)
    return Face("interior", e1, e2, axis, sign, tuple(rect), ref, maps, conforming)


def build_faces(mesh):
    """All interior sub-faces and boundary faces of ``mesh``.

    Each interior face is emitted once, from the coarser side (or from the
    lower index for equal levels).  Edge and corner contacts have zero area
    and never appear.
    """
    faces = []
    for e, key in enumerate(mesh.leaves):
        L = key[0]
        for axis in AXES:
            for d in (-1, 1):
                q = list(key[1:])
                q[axis] += d
                if not mesh._in_domain(L, q):
                    faces.append(_make_face(mesh, e, -1, axis, d))
                    continue
                nb = (L, *q)
                if nb in mesh:
                    n = mesh.index(nb)
                    if e < n:
                        faces.append(_make_face(mesh, e, n, axis, d))
                    continue
                if L > 0 and _parent(nb) in mesh:
                    continue  # emitted from the coarse side
                off = 0 if d > 0 else 1
                for kid in _children(nb):
                    kq = kid[1:]
                    if (kq[axis] & 1) != off:
                        continue
                    if kid not in mesh:
                        raise ValueError("mesh is not 2:1 balanced")
                    faces.append(_make_face(mesh, e, mesh.index(kid), axis, d))
    return faces


def build_mesh(dims=(1, 1, 1), lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0), eps=1.0, mu=1.0,
               refine=None):
    """Coarse Cartesian brick mesh, optionally pre-refined.

    ``refine`` is an iterable of callables/boxes: each entry is either a
    predicate on element centers or a box ``((x0, y0, z0), (x1, y1, z1))``;
    elements whose centers match are refined once, in order.
    """
    mesh = SpatialMesh(dims, lo, hi, eps, mu)
    for region in refine or ():
        if callable(region):
            pred = region
        else:
            a, b = (np.asarray(v, dtype=float) for v in region)
            pred = lambda c, a=a, b=b: bool(np.all(c >= a) and np.all(c <= b))
        sel = [e for e, c in enumerate(mesh.centers()) if pred(c)]
        mesh = mesh.refine(sel)
    return mesh


# -- time ---------------------------------------------------------------------

@dataclass(frozen=True)
class TemporalPartition:
    """Dyadic bisection levels per macro-element for one slab ``(t0, t1]``."""

    t0: float
    t1: float
    levels: tuple

    @property
    def dt(self):
        return self.t1 - self.t0

    def n_sub(self, e):
        return 2 ** self.levels[e]

    def sub_intervals(self, e):
        """Physical sub-interval bounds of element ``e``."""
        n = self.n_sub(e)
        br = self.t0 + self.dt * np.arange(n + 1) / n
        return list(zip(br[:-1], br[1:]))

    def uniform(self):
        return len(set(self.levels)) <= 1


def set_temporal_levels(t0, t1, levels):
    levels = tuple(int(v) for v in levels)
    if any(v < 0 for v in levels):
        raise ValueError("temporal levels must be non-negative")
    return TemporalPartition(float(t0), float(t1), levels)


@dataclass(frozen=True)
class TimePair:
    k1: int
    k2: int
    s: float
    b: float
    overlap: tuple  # reference interval of sub-interval k1

    def measure(self, dt, level1):
        return (self.overlap[1] - self.overlap[0]) * dt / 2 ** level1


def pair_temporal_faces(partition, face):
    """Overlapping sub-interval pairs across an interior face.

    ``s, b`` map reference time of ``I_k1`` (side 1) to that of ``I_k2``.
    """
    l1, l2 = partition.levels[face.e1], partition.levels[face.e2]
    pairs = []
    for k1 in range(2 ** l1):
        a1, b1 = Fraction(k1, 2 ** l1), Fraction(k1 + 1, 2 ** l1)
        for k2 in range(2 ** l2):
            a2, b2 = Fraction(k2, 2 ** l2), Fraction(k2 + 1, 2 ** l2)
            lo, hi = max(a1, a2), min(b1, b2)
            if hi <= lo:
                continue
            s = Fraction(2 ** l2, 2 ** l1)
            b = (a1 - a2) * 2 ** l2
            ov = ((lo - a1) * 2 ** l1, (hi - a1) * 2 ** l1)
            pairs.append(TimePair(k1, k2, float(s), float(b), (float(ov[0]), float(ov[1]))))
    return pairs


def temporal_groups(level1, level2):
    """Coarse intervals of the coarser partition with the sub-interval
    indices of each side they contain: ``[(J, subs1, subs2), ...]``."""
    lc = min(level1, level2)
    out = []
    for J in range(2 ** lc):
        r1 = 2 ** (level1 - lc)
        r2 = 2 ** (level2 - lc)
        out.append((J, list(range(J * r1, (J + 1) * r1)), list(range(J * r2, (J + 1) * r2))))
    return out
