"""Degree bookkeeping, DOF layout, continuity chaining and projections.

Trial fields use the integrated Legendre basis in time and orthonormal
Legendre polynomials in each spatial direction of the reference brick.
Coefficients are stored per macro-element as arrays of shape
``(n_sub, 3, p_t + 1, p_x + 1, p_y + 1, p_z + 1)``; test/residual arrays
drop to ``p_t`` temporal modes.  Vector fields are pulled back covariantly,
``E_c = Ehat_c / h_c`` on a brick with edge lengths ``h``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import basis1d as b1
from .mesh import TemporalPartition, _children, _parent

FIELDS = ("E", "H")


@dataclass(frozen=True)
class DegreeVector:
    pt: int
    px: int
    py: int
    pz: int

    def __post_init__(self):
        if self.pt < 1:
            raise ValueError("temporal degree must be at least 1")
        if min(self.px, self.py, self.pz) < 0:
            raise ValueError("spatial degrees must be non-negative")

    @property
    def spatial(self):
        return (self.px, self.py, self.pz)

    @property
    def spatial_shape(self):
        return (self.px + 1, self.py + 1, self.pz + 1)

    def shifted(self, dt=0, dx=0, dy=0, dz=0):
        return DegreeVector(self.pt + dt, self.px + dx, self.py + dy, self.pz + dz)

    @classmethod
    def uniform(cls, p, pt=None):
        return cls(p if pt is None else pt, p, p, p)


class SpaceDescriptor:
    """Mesh, temporal partition of one slab and per-element degrees."""

    def __init__(self, mesh, partition, degrees):
        if len(partition.levels) != mesh.n_elements or len(degrees) != mesh.n_elements:
            raise ValueError("levels and degrees must have one entry per element")
        self.mesh = mesh
        self.partition = partition
        self.degrees = tuple(d if isinstance(d, DegreeVector) else DegreeVector(*d) for d in degrees)
        self.layout = dof_layout(self)

    @classmethod
    def uniform(cls, mesh, t0, t1, p, pt=None, level=0):
        from .mesh import set_temporal_levels
        n = mesh.n_elements
        return cls(mesh, set_temporal_levels(t0, t1, [level] * n),
                   [DegreeVector.uniform(p, pt)] * n)

    @property
    def n_elements(self):
        return self.mesh.n_elements

    @property
    def t0(self):
        return self.partition.t0

    @property
    def t1(self):
        return self.partition.t1

    @property
    def dt(self):
        return self.partition.dt

    def n_sub(self, e):
        return self.partition.n_sub(e)

    def tau(self, e):
        return self.dt / self.n_sub(e)

    def test_shape(self, e):
        d = self.degrees[e]
        return (self.n_sub(e), 3, d.pt, *d.spatial_shape)

    def trial_shape(self, e):
        d = self.degrees[e]
        return (self.n_sub(e), 3, d.pt + 1, *d.spatial_shape)

    @property
    def n_unknowns(self):
        return self.layout.size

    def spatial_degrees(self):
        return [d.spatial for d in self.degrees]

    def with_slab(self, t0, t1):
        return SpaceDescriptor(self.mesh, TemporalPartition(t0, t1, self.partition.levels), self.degrees)

    def has_local_time_refinement(self):
        return not self.partition.uniform() or len({d.pt for d in self.degrees}) > 1


@dataclass(frozen=True)
class DofLayout:
    """Contiguous blocks per (element, field); within a block the order is
    (sub-interval, component, temporal, x, y, z)."""

    offsets: tuple  # offsets[e][f]
    shapes: tuple  # per element test-block shape
    size: int

    def block(self, e, field):
        f = FIELDS.index(field) if isinstance(field, str) else field
        start = self.offsets[e][f]
        return slice(start, start + int(np.prod(self.shapes[e])))

    def index(self, e, field, k, c, i, jx, jy, jz):
        s = self.block(e, field).start
        return s + int(np.ravel_multi_index((k, c, i, jx, jy, jz), self.shapes[e]))


def dof_layout(space):
    offsets, shapes, pos = [], [], 0
    for e in range(space.n_elements):
        shp = space.test_shape(e)
        n = int(np.prod(shp))
        offsets.append((pos, pos + n))
        shapes.append(shp)
        pos += 2 * n
    return DofLayout(tuple(offsets), tuple(shapes), pos)


# -- states ---------------------------------------------------------------------

@dataclass
class NodalState:
    """Spatial fields at a time node: per element ``(3, px+1, py+1, pz+1)``."""

    mesh: object
    degrees: list  # spatial degree triples
    E: list
    H: list

    @classmethod
    def zeros(cls, mesh, degrees):
        shp = [(3, *(p + 1 for p in d)) for d in degrees]
        return cls(mesh, list(degrees), [np.zeros(s) for s in shp], [np.zeros(s) for s in shp])

    def copy(self):
        return NodalState(self.mesh, list(self.degrees), [a.copy() for a in self.E],
                          [a.copy() for a in self.H])


class FieldState:
    """Coefficient blocks for E and H on every macro-element of a slab."""

    def __init__(self, space, kind, E, H):
        if kind not in ("trial", "test"):
            raise ValueError("kind must be 'trial' or 'test'")
        self.space, self.kind, self.E, self.H = space, kind, E, H

    @classmethod
    def zeros(cls, space, kind):
        shape = space.trial_shape if kind == "trial" else space.test_shape
        n = space.n_elements
        return cls(space, kind, [np.zeros(shape(e)) for e in range(n)],
                   [np.zeros(shape(e)) for e in range(n)])

    def copy(self):
        return FieldState(self.space, self.kind, [a.copy() for a in self.E],
                          [a.copy() for a in self.H])

    def blocks(self, field):
        return self.E if field in ("E", 0) else self.H

    def to_vector(self):
        """Flatten a test state (or the unknown part of a trial state)."""
        lay = self.space.layout
        out = np.empty(lay.size)
        for e in range(self.space.n_elements):
            for f, arrs in enumerate((self.E, self.H)):
                a = arrs[e] if self.kind == "test" else arrs[e][:, :, 1:]
                out[lay.block(e, f)] = a.ravel()
        return out

    def initial(self):
        """Nodal state at the slab start (l_0 blocks of the first sub-interval)."""
        if self.kind != "trial":
            raise ValueError("only trial states carry nodal values")
        return NodalState(self.space.mesh, self.space.spatial_degrees(),
                          [a[0, :, 0].copy() for a in self.E], [a[0, :, 0].copy() for a in self.H])

    def end(self):
        """Nodal state at the slab end (l_1 blocks of the last sub-interval)."""
        if self.kind != "trial":
            raise ValueError("only trial states carry nodal values")
        return NodalState(self.space.mesh, self.space.spatial_degrees(),
                          [a[-1, :, 1].copy() for a in self.E], [a[-1, :, 1].copy() for a in self.H])

    def check_chaining(self, tol=0.0):
        for arrs in (self.E, self.H):
            for a in arrs:
                if a.shape[0] > 1 and np.max(np.abs(a[1:, :, 0] - a[:-1, :, 1])) > tol:
                    return False
        return True

    def __add__(self, other):
        return FieldState(self.space, self.kind, [a + b for a, b in zip(self.E, other.E)],
                          [a + b for a, b in zip(self.H, other.H)])

    def __sub__(self, other):
        return FieldState(self.space, self.kind, [a - b for a, b in zip(self.E, other.E)],
                          [a - b for a, b in zip(self.H, other.H)])

    def scaled(self, s):
        return FieldState(self.space, self.kind, [s * a for a in self.E], [s * a for a in self.H])


def _chain(block, init):
    """Trial array from unknown ``block`` (n, 3, p_t, ...) and ``init`` (3, ...)."""
    n, c, pt = block.shape[:3]
    arr = np.empty((n, c, pt + 1) + block.shape[3:])
    arr[:, :, 1:] = block
    arr[0, :, 0] = init
    if n > 1:
        arr[1:, :, 0] = block[:-1, :, 0]
    return arr


def trial_from_vector(space, u, init=None):
    """Trial state from the unknown vector and the nodal initial state."""
    lay = space.layout
    E, H = [], []
    for e in range(space.n_elements):
        shp = lay.shapes[e]
        for f, out in enumerate((E, H)):
            z = np.zeros((3, *shp[3:])) if init is None else (init.E, init.H)[f][e]
            out.append(_chain(u[lay.block(e, f)].reshape(shp), z))
    return FieldState(space, "trial", E, H)


def test_from_vector(space, r):
    lay = space.layout
    E = [r[lay.block(e, 0)].reshape(lay.shapes[e]).copy() for e in range(space.n_elements)]
    H = [r[lay.block(e, 1)].reshape(lay.shapes[e]).copy() for e in range(space.n_elements)]
    return FieldState(space, "test", E, H)


def constant_in_time(space, nodal):
    """Trial state equal to ``nodal`` on the whole slab."""
    E, H = [], []
    for e in range(space.n_elements):
        for src, out in ((nodal.E, E), (nodal.H, H)):
            a = np.zeros(space.trial_shape(e))
            a[:, :, 0] = src[e]
            a[:, :, 1] = src[e]
            out.append(a)
    return FieldState(space, "trial", E, H)


# -- projections ------------------------------------------------------------------

def _apply_time(mat, arr):
    """Contract the temporal axis (axis 2) with ``mat`` (rows x cols)."""
    return np.moveaxis(np.tensordot(mat, arr, axes=([1], [2])), 0, 2)


def project_trial_to_test(u):
    """Temporal L2 projection of a trial state onto the test space."""
    if u.kind != "trial":
        raise ValueError("expected a trial state")
    E, H = [], []
    for e, d in enumerate(u.space.degrees):
        C = b1.trial_to_test_projection_matrix(d.pt)
        E.append(_apply_time(C, u.E[e]))
        H.append(_apply_time(C, u.H[e]))
    return FieldState(u.space, "test", E, H)


@lru_cache(maxsize=None)
def common_test_matrices(level, pt, level_c, q):
    """Moments against the common temporal test space.

    The common space lives on intervals ``J`` of dyadic level ``level_c``
    with ``q`` Legendre modes.  For a sub-interval at ``level`` (offset ``o``
    inside its ``J``) returns ``(P, Q)`` lists indexed by ``o`` with

    ``P[o][r, i] = (1/n) int_0^1 L_r((o + x)/n) l_i(x) dx`` and
    ``Q[o][r, m] = (1/n) int_0^1 L_r((o + x)/n) L_m(x) dx``,

    ``n = 2**(level - level_c)``.  With ``|J|`` the length of ``J`` the
    temporal moment of the projected pairing is ``|J| Q^T P``.
    """
    n = 2 ** (level - level_c)
    x, w = b1.gauss_rule(max(pt, q) + 2)
    Ps, Qs = [], []
    for o in range(n):
        Lq = b1.legendre_table(q - 1, (o + x) / n) * w / n
        Ps.append(Lq @ b1.ilegendre_table(pt, x).T)
        Qs.append(Lq @ b1.legendre_table(pt - 1, x).T)
    for a in Ps + Qs:
        a.setflags(write=False)
    return Ps, Qs


def common_projection_operator(level_a, pt_a, level_b, pt_b, level_c=None, q=None):
    """Temporal factor of the projected pairing between two sides.

    Returns a dict ``{(ka, kb): M}`` with ``M`` of shape ``(pt_a, pt_b + 1)``
    in units of the slab length: the moment
    ``int L_m^{(ka)} pi_f(l_i^{(kb)}) dt = dt * M[m, i]``.  The common space
    defaults to the coarser level and smaller degree of the two sides; pass
    ``level_c``/``q`` to use the space of a face when both sides coincide.
    """
    lc = min(level_a, level_b) if level_c is None else level_c
    q = min(pt_a, pt_b) if q is None else q
    Pa, Qa = common_test_matrices(level_a, pt_a, lc, q)
    Pb, Qb = common_test_matrices(level_b, pt_b, lc, q)
    ra, rb = 2 ** (level_a - lc), 2 ** (level_b - lc)
    J = 2.0 ** -lc
    out = {}
    for j in range(2 ** lc):
        for oa in range(ra):
            for ob in range(rb):
                out[(j * ra + oa, j * rb + ob)] = J * Qa[oa].T @ Pb[ob]
    return out


def temporal_projector(level, pt, level_c, q):
    """Matrix of the common-space projection acting on test coefficients
    of one coarse interval: maps the stacked Legendre coefficients of the
    ``n`` sub-intervals to themselves.  Orthogonal w.r.t. the temporal L2
    product weighted by the sub-interval length."""
    _, Qs = common_test_matrices(level, pt, level_c, q)
    n = len(Qs)
    Q = np.hstack(Qs)  # (q, n*pt)
    # sub-interval coefficients are orthonormal up to the factor |J|/n
    return n * Q.T @ Q


# -- spatial L2 projection -----------------------------------------------------------

def _tables(p, x):
    return b1.legendre_table(p, x)


def l2_project_spatial(f, mesh, degrees, nq=None):
    """Element-wise L2 projection of ``f(x, y, z) -> (3, ...)`` after covariant
    pullback; Gauss rule with ``p + 2`` points per direction by default."""
    E = []
    for e in range(mesh.n_elements):
        ps = degrees[e]
        o, h = mesh.origin(e), mesh.h(e)
        rules = [b1.gauss_rule((nq or p + 2)) for p in ps]
        pts = [o[a] + h[a] * rules[a][0] for a in range(3)]
        X, Y, Z = np.meshgrid(*pts, indexing="ij")
        vals = np.asarray(f(X, Y, Z), dtype=float) * h[:, None, None, None]
        tabs = [_tables(ps[a], rules[a][0]) * rules[a][1] for a in range(3)]
        E.append(np.einsum("cxyz,ix,jy,kz->cijk", vals, *tabs, optimize=True))
    return E


def l2_project_nodal(fE, fH, mesh, degrees, nq=None):
    return NodalState(mesh, list(degrees), l2_project_spatial(fE, mesh, degrees, nq),
                      l2_project_spatial(fH, mesh, degrees, nq))


def l2_project_function(fE, fH, space, nq=None):
    """Trial state approximating ``f(t, x, y, z)`` on the slab.

    Nodal (l_0, l_1) blocks are spatial L2 projections at the sub-interval
    end points, so chaining holds by construction; bubble blocks are the
    L2-best fit of the remainder in time.  Members of the space are
    reproduced exactly.
    """
    E, H = [], []
    mesh = space.mesh
    for e in range(space.n_elements):
        d = space.degrees[e]
        ps = d.spatial
        o, h = mesh.origin(e), mesh.h(e)
        nt = nq or d.pt + 2
        tx, tw = b1.gauss_rule(nt)
        rules = [b1.gauss_rule((nq or p + 2)) for p in ps]
        pts = [o[a] + h[a] * rules[a][0] for a in range(3)]
        X, Y, Z = np.meshgrid(*pts, indexing="ij")
        tabs = [_tables(ps[a], rules[a][0]) * rules[a][1] for a in range(3)]
        lt = b1.ilegendre_table(d.pt, tx)
        for f, out in ((fE, E), (fH, H)):
            arr = np.zeros(space.trial_shape(e))
            for k, (ta, tb) in enumerate(space.partition.sub_intervals(e)):
                def proj(t):
                    vals = np.asarray(f(t, X, Y, Z), dtype=float) * h[:, None, None, None]
                    return np.einsum("cxyz,ix,jy,kz->cijk", vals, *tabs, optimize=True)
                arr[k, :, 0] = proj(ta)
                arr[k, :, 1] = proj(tb)
                if d.pt >= 2:
                    samples = np.stack([proj(ta + (tb - ta) * t) for t in tx])  # (nt, 3, ...)
                    rem = samples - np.einsum("q,c...->qc...", lt[0], arr[k, :, 0]) \
                        - np.einsum("q,c...->qc...", lt[1], arr[k, :, 1])
                    B = lt[2:] * tw  # (pt-1, nt)
                    G = B @ lt[2:].T
                    rhs = np.tensordot(B, rem, axes=([1], [0]))
                    arr[k, :, 2:] = np.moveaxis(np.tensordot(np.linalg.inv(G), rhs, axes=([1], [0])), 0, 1)
            out.append(arr)
    return FieldState(space, "trial", E, H)


def _axis_transfer(p_new, p_old, h_new, h_old, o_new, o_old):
    """1D moments int_{I'} L'_j(x') L_m(psi(x')) dx' over the overlap, in the
    new element's reference coordinate."""
    lo = max(0.0, (o_old - o_new) / h_new)
    hi = min(1.0, (o_old + h_old - o_new) / h_new)
    s = h_new / h_old
    b = (o_new - o_old) / h_old
    if abs(s - 1) < 1e-13 and abs(b) < 1e-13:
        s, b = 1.0, 0.0
    lo = 0.0 if abs(lo) < 1e-13 else lo
    hi = 1.0 if abs(hi - 1) < 1e-13 else hi
    return b1.subinterval_transfer_matrix(p_new, p_old, s, b, (lo, hi))


def _sources(new_mesh, old_mesh, e):
    key = new_mesh.leaves[e]
    k = key
    while k[0] >= 0:
        if k in old_mesh:
            return [old_mesh.index(k)]
        if k[0] == 0:
            break
        k = _parent(k)
    out, stack = [], [key]
    while stack:
        k = stack.pop()
        if k in old_mesh:
            out.append(old_mesh.index(k))
        else:
            stack.extend(_children(k))
    return out


def transfer_spatial(blocks, old_mesh, old_degrees, new_mesh, new_degrees):
    """Covariant spatial L2 projection of per-element coefficient blocks
    ``(..., 3, nx, ny, nz)`` between octree meshes over the same box."""
    out = []
    for e in range(new_mesh.n_elements):
        pn = new_degrees[e]
        hn, on = new_mesh.h(e), new_mesh.origin(e)
        lead = blocks[0].shape[:-4]
        acc = np.zeros(lead + (3,) + tuple(p + 1 for p in pn))
        for s in _sources(new_mesh, old_mesh, e):
            po = old_degrees[s]
            ho, oo = old_mesh.h(s), old_mesh.origin(s)
            same = (tuple(pn) == tuple(po) and np.array_equal(hn, ho) and np.array_equal(on, oo))
            if same:
                acc = acc + blocks[s]
                continue
            A = [_axis_transfer(pn[a], po[a], hn[a], ho[a], on[a], oo[a]) for a in range(3)]
            src = blocks[s] * (hn / ho)[:, None, None, None]
            acc = acc + np.einsum("...cxyz,ix,jy,kz->...cijk", src, *A, optimize=True)
        out.append(acc)
    return out


def transfer_between_slabs(nodal, new_mesh, new_degrees):
    """Project an end-of-slab nodal state onto the next slab's spatial space.

    Identical spaces give a bit-identical copy; nested enrichment is exact.
    """
    new_degrees = [tuple(d) for d in new_degrees]
    old = [tuple(d) for d in nodal.degrees]
    if nodal.mesh.same_as(new_mesh) and old == new_degrees:
        return nodal.copy()
    E = transfer_spatial(nodal.E, nodal.mesh, old, new_mesh, new_degrees)
    H = transfer_spatial(nodal.H, nodal.mesh, old, new_mesh, new_degrees)
    return NodalState(new_mesh, new_degrees, E, H)


# -- evaluation ---------------------------------------------------------------------

def evaluate_block(arr, h, tt, xs, trial=True):
    """Physical values of one element block on a tensor grid.

    ``arr`` is ``(n_sub, 3, nt, nx, ny, nz)``; ``tt`` reference times in each
    sub-interval; ``xs`` reference coordinates per axis.  Returns
    ``(n_sub, 3, len(tt), len(x), len(y), len(z))``.
    """
    pt = arr.shape[2] - 1
    Tt = b1.ilegendre_table(pt, tt) if trial else b1.legendre_table(pt, tt)
    tabs = [b1.legendre_table(arr.shape[3 + a] - 1, xs[a]) for a in range(3)]
    v = np.einsum("kcijmn,iq,jx,my,nz->kcqxyz", arr, Tt, *tabs, optimize=True)
    return v / h[None, :, None, None, None, None]


def evaluate_nodal(block, h, xs):
    tabs = [b1.legendre_table(block.shape[1 + a] - 1, xs[a]) for a in range(3)]
    v = np.einsum("cjmn,jx,my,nz->cxyz", block, *tabs, optimize=True)
    return v / h[:, None, None, None]


def nodal_l2_norm_sq(nodal, weights=None):
    """Sum over elements of ``int w |E|^2`` for the E blocks of ``nodal``
    (no weights by default); uses the diagonal reference mass."""
    tot = 0.0
    for e, a in enumerate(nodal.E):
        h, J = nodal.mesh.element_jacobian(e)
        m = J / h ** 2
        w = 1.0 if weights is None else weights[e]
        tot += w * float(np.sum(m[:, None, None, None] * a * a))
    return tot


def nodal_energy(nodal):
    """Electromagnetic energy 0.5 int (eps |E|^2 + mu |H|^2)."""
    mesh = nodal.mesh
    tot = 0.0
    for e in range(mesh.n_elements):
        h, J = mesh.element_jacobian(e)
        m = (J / h ** 2)[:, None, None, None]
        tot += mesh.eps(e) * float(np.sum(m * nodal.E[e] ** 2))
        tot += mesh.mu(e) * float(np.sum(m * nodal.H[e] ** 2))
    return 0.5 * tot
