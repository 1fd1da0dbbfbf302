"""Matrix-free slab residual for the space-time Maxwell discretization.

For trial fields ``U = (E, H)`` and test functions ``(v, w)`` on one slab

    B(U; v, w) = <eps dE/dt, v> - <H, curl v> + <mu dH/dt, w> + <curl E, w>
                 + face terms (central fluxes, projected cross terms)
                 + optional jump dissipation
    L(v, w)    = <J, v> + <g, n x w>_boundary + alpha_E <g_t, v_t>_boundary

and the residual is ``B(U) - L`` expressed in test-basis coefficients.
Everything reduces to 1D matrices thanks to the tensor-product bases and
the affine brick geometry; the volume curl uses parity sums so that each
derivative sweep is linear in the number of coefficients.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import basis1d as b1
from .fespace import FieldState, common_projection_operator, test_from_vector, trial_from_vector
from .mesh import tangential_axes

LEVI = np.zeros((3, 3, 3))
for _i, _j, _k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
    LEVI[_i, _j, _k] = 1.0
    LEVI[_i, _k, _j] = -1.0


@dataclass
class KernelWorkspace:
    """Flop counters per kernel class (monotone)."""

    flops: dict = field(default_factory=lambda: {"mass": 0, "curl": 0, "flux": 0, "precond": 0,
                                                 "load": 0})

    def add(self, kind, n):
        self.flops[kind] += int(n)

    def reset(self):
        for k in self.flops:
            self.flops[k] = 0

    def total(self, kinds=("mass", "curl", "flux")):
        return sum(self.flops[k] for k in kinds)

    def to_csv_rows(self, p):
        return [(p, k, v) for k, v in self.flops.items()]


@dataclass(frozen=True)
class DissipationParams:
    c: float = 0.0

    def __post_init__(self):
        if self.c < 0:
            raise ValueError("dissipation constant must be non-negative")

    def alphas(self, eps, mu):
        """Face coefficients from the side materials (one or two sides)."""
        zE = np.mean([np.sqrt(m / e) for e, m in zip(eps, mu)])
        zH = np.mean([np.sqrt(e / m) for e, m in zip(eps, mu)])
        return self.c / zE, self.c / zH


# -- staged face kernels -------------------------------------------------------------

def trace_extract(block, axis, endpoint_values):
    """Contract the spatial index along ``axis`` with endpoint values.

    ``block`` has shape ``(n, 3, nt, nx, ny, nz)``; the result drops the
    normal axis, leaving the two tangential ones in increasing axis order.
    """
    return np.tensordot(block, endpoint_values, axes=([3 + axis], [0]))


def _count_mm(m, n, k):
    return 2 * m * n * k


class _Pairing:
    """Precomputed data for one (test side a, trial side b) face coupling."""

    __slots__ = ("a", "b", "ea", "eb", "S1", "S2", "La", "Lb", "Wc", "Wd", "temporal", "self_T")


class _FacePlan:
    __slots__ = ("face", "axis", "pairs", "alpha_E", "alpha_H", "boundary", "e", "sigma",
                 "g_data")


class SlabOperator:
    """Residual of one slab.  ``apply`` evaluates ``B(U)`` for a trial state,
    ``load`` the right-hand side functional, and the ``matvec``/``rhs`` pair
    expose the linear system in the unknown ordering of ``space.layout``.
    """

    def __init__(self, space, dissipation=0.0, workspace=None, tables=None):
        self.space = space
        self.diss = dissipation if isinstance(dissipation, DissipationParams) \
            else DissipationParams(float(dissipation))
        self.ws = workspace or KernelWorkspace()
        mesh = space.mesh
        self.n = space.n_elements
        self.M_E, self.M_H, self.Tt, self.gram = [], [], [], []
        self.Tt_nz = []
        for e in range(self.n):
            h, J = mesh.element_jacobian(e)
            self.M_E.append(mesh.eps(e) * J / h ** 2)
            self.M_H.append(mesh.mu(e) * J / h ** 2)
            pt = space.degrees[e].pt
            tau = space.tau(e)
            self.Tt.append(tau * b1.temporal_mass(pt - 1, pt))
            self.Tt_nz.append([(i, m, tau * v) for i, m, v in b1.temporal_mass_nonzeros(pt)])
            self.gram.append(tau * J / h ** 2)
        self._build_faces()
        self._build_gram_vector()

    # -- setup ---------------------------------------------------------------------
    def _endpoint(self, p, side):
        return b1.legendre_table(p, np.array([float(side)]))[:, 0]

    def _build_faces(self):
        sp, mesh = self.space, self.space.mesh
        self.plans = []
        for f in mesh.faces():
            plan = _FacePlan()
            plan.face, plan.axis = f, f.axis
            t1, t2 = tangential_axes(f.axis)
            sides = f.sides
            eps = [mesh.eps(e) for e in sides]
            mu = [mesh.mu(e) for e in sides]
            plan.alpha_E, plan.alpha_H = self.diss.alphas(eps, mu)
            plan.boundary = f.e2 < 0
            plan.pairs = []
            for a, ea in enumerate(sides):
                for b, eb in enumerate(sides):
                    pr = _Pairing()
                    pr.a, pr.b, pr.ea, pr.eb = a, b, ea, eb
                    da, db = sp.degrees[ea], sp.degrees[eb]
                    pa, pb = da.spatial, db.spatial
                    ha, hb = mesh.h(ea), mesh.h(eb)
                    (s1, o1), (s2, o2) = f.maps[(a, b)]
                    I1, I2 = f.ref[a]
                    S1 = b1.subinterval_transfer_matrix(pa[t1], pb[t1], s1, o1, I1)
                    S2 = b1.subinterval_transfer_matrix(pa[t2], pb[t2], s2, o2, I2)
                    conf1 = b1.is_identity_transfer(s1, o1, I1) and pa[t1] == pb[t1]
                    conf2 = b1.is_identity_transfer(s2, o2, I2) and pa[t2] == pb[t2]
                    pr.S1 = None if conf1 else S1
                    pr.S2 = None if conf2 else S2
                    pr.La = self._endpoint(pa[f.axis], f.endpoint(a))
                    pr.Lb = self._endpoint(pb[f.axis], f.endpoint(b))
                    sigma = f.normal_sign(a)
                    area = ha[t1] * ha[t2]
                    Wc = np.zeros((3, 3))
                    Wd = np.zeros((3, 3))
                    for d in range(3):
                        for c in range(3):
                            Wc[d, c] = sigma * LEVI[c, f.axis, d] * area / (hb[c] * ha[d])
                        if d != f.axis:
                            Wd[d, d] = area / (hb[d] * ha[d])
                    pr.Wc, pr.Wd = Wc, Wd
                    pr.self_T = self.Tt[ea] if a == b else None
                    if plan.boundary:
                        pr.temporal = None
                    else:
                        lv = sp.partition.levels
                        lc = min(lv[e] for e in sides)
                        q = min(sp.degrees[e].pt for e in sides)
                        ops = common_projection_operator(lv[ea], da.pt, lv[eb], db.pt, lc, q)
                        pr.temporal = [(ka, kb, sp.dt * M) for (ka, kb), M in sorted(ops.items())]
                    plan.pairs.append(pr)
            self.plans.append(plan)

    def _build_gram_vector(self):
        lay = self.space.layout
        g = np.empty(lay.size)
        for e in range(self.n):
            shp = lay.shapes[e]
            blk = np.broadcast_to(self.gram[e][None, :, None, None, None, None], shp)
            g[lay.block(e, 0)] = blk.ravel()
            g[lay.block(e, 1)] = blk.ravel()
        self.gram_vector = g
        self.is_E = np.zeros(lay.size, dtype=bool)
        for e in range(self.n):
            self.is_E[lay.block(e, 0)] = True

    # -- volume kernels --------------------------------------------------------------
    def mass_residual(self, U, out):
        for e in range(self.n):
            for arr, M, R in ((U.E[e], self.M_E[e], out.E[e]), (U.H[e], self.M_H[e], out.H[e])):
                Mb = M[None, :, None, None, None, None]
                R += Mb * arr[:, :, 1:]
                R[:, :, 0] -= Mb[:, :, 0] * arr[:, :, 0]
                self.ws.add("mass", 2 * R.size + arr[:, :, 0].size * 2)

    def _banded_time(self, nz, arr):
        """Contract the temporal axis with the banded temporal mass."""
        pt = arr.shape[2] - 1
        out = np.zeros(arr.shape[:2] + (pt,) + arr.shape[3:])
        for i, m, v in nz:
            out[:, :, i] += v * arr[:, :, m]
        self.ws.add("curl", 2 * len(nz) * arr[:, :, 0].size)
        return out

    def curl_residual(self, U, out):
        for e in range(self.n):
            Et = self._banded_time(self.Tt_nz[e], U.E[e])
            Ht = self._banded_time(self.Tt_nz[e], U.H[e])
            d = b1.apply_derivative
            dt = b1.apply_derivative_transpose
            ax = 3  # first spatial axis of (n, c, t, x, y, z) minus component slicing
            Ex, Ey, Ez = Et[:, 0], Et[:, 1], Et[:, 2]
            Hx, Hy, Hz = Ht[:, 0], Ht[:, 1], Ht[:, 2]
            sx, sy, sz = ax - 1, ax, ax + 1  # axes after removing the component index
            RH, RE = out.H[e], out.E[e]
            RH[:, 0] += d(Ez, sy) - d(Ey, sz)
            RH[:, 1] += d(Ex, sz) - d(Ez, sx)
            RH[:, 2] += d(Ey, sx) - d(Ex, sy)
            RE[:, 0] -= dt(Hy, sz) - dt(Hz, sy)
            RE[:, 1] -= dt(Hz, sx) - dt(Hx, sz)
            RE[:, 2] -= dt(Hx, sy) - dt(Hy, sx)
            self.ws.add("curl", 12 * 5 * Ex.size)

    # -- face kernels -----------------------------------------------------------------
    def _spatial(self, X, pr):
        if pr.S1 is not None:
            X = np.matmul(pr.S1, X)
            self.ws.add("flux", _count_mm(X.size // X.shape[-1], X.shape[-1], pr.S1.shape[1]) // 1)
        if pr.S2 is not None:
            X = np.matmul(X, pr.S2.T)
            self.ws.add("flux", _count_mm(X.size // X.shape[-1], X.shape[-1], pr.S2.shape[1]))
        return X

    def _mix(self, W, X):
        self.ws.add("flux", 2 * 9 * X.size // 3)
        return np.moveaxis(np.tensordot(W, X, axes=([1], [1])), 0, 1)

    def _self_time(self, T, X):
        self.ws.add("flux", 2 * T.shape[0] * X.size)
        return np.moveaxis(np.tensordot(T, X, axes=([1], [2])), 0, 2)

    def _cross_time(self, ops, X, n_a, pt_a):
        Y = np.zeros((n_a, 3, pt_a) + X.shape[3:])
        for ka, kb, M in ops:
            Y[ka] += np.moveaxis(np.tensordot(M, X[kb], axes=([1], [1])), 0, 1)
            self.ws.add("flux", 2 * M.shape[0] * X[kb].size)
        return Y

    def _scatter(self, R, Y, axis, La):
        shp = [1] * 6
        shp[3 + axis] = La.size
        R += np.expand_dims(Y, 3 + axis) * La.reshape(shp)
        self.ws.add("flux", 2 * R.size)

    def flux_residual(self, U, out, dissipation=True):
        sp = self.space
        diss = dissipation and self.diss.c > 0
        for plan in self.plans:
            axis = plan.axis
            for pr in plan.pairs:
                AH = self._spatial(trace_extract(U.H[pr.eb], axis, pr.Lb), pr)
                AE = self._spatial(trace_extract(U.E[pr.eb], axis, pr.Lb), pr)
                self.ws.add("flux", 2 * 2 * U.H[pr.eb].size)
                n_a, pt_a = sp.n_sub(pr.ea), sp.degrees[pr.ea].pt
                if plan.boundary:
                    YE = self._mix(pr.Wc, AH)
                    if diss:
                        YE = YE + self._mix(plan.alpha_E * pr.Wd, AE)
                    YH = self._mix(pr.Wc, AE)
                    self._scatter(out.E[pr.ea], self._self_time(pr.self_T, YE), axis, pr.La)
                    self._scatter(out.H[pr.ea], self._self_time(pr.self_T, YH), axis, pr.La)
                    continue
                if pr.a == pr.b:
                    YE = self._self_time(pr.self_T, self._mix(0.5 * pr.Wc, AH))
                    YH = self._self_time(pr.self_T, self._mix(0.5 * pr.Wc, AE))
                    if diss:
                        YE += self._cross_time(pr.temporal, self._mix(plan.alpha_E * pr.Wd, AE), n_a, pt_a)
                        YH += self._cross_time(pr.temporal, self._mix(plan.alpha_H * pr.Wd, AH), n_a, pt_a)
                else:
                    ZE = self._mix(0.5 * pr.Wc, AH)
                    ZH = self._mix(-0.5 * pr.Wc, AE)
                    if diss:
                        ZE = ZE + self._mix(-plan.alpha_E * pr.Wd, AE)
                        ZH = ZH + self._mix(-plan.alpha_H * pr.Wd, AH)
                    YE = self._cross_time(pr.temporal, ZE, n_a, pt_a)
                    YH = self._cross_time(pr.temporal, ZH, n_a, pt_a)
                self._scatter(out.E[pr.ea], YE, axis, pr.La)
                self._scatter(out.H[pr.ea], YH, axis, pr.La)

    # -- operator ------------------------------------------------------------------------
    def apply(self, U, parts=("mass", "curl", "flux")):
        """``B(U)`` as a test state."""
        if U.kind != "trial":
            raise ValueError("apply expects a trial state")
        out = FieldState.zeros(self.space, "test")
        if "mass" in parts:
            self.mass_residual(U, out)
        if "curl" in parts:
            self.curl_residual(U, out)
        if "flux" in parts:
            self.flux_residual(U, out)
        return out

    def load(self, J=None, g=None, nq=None):
        """Right-hand side functional in test coefficients."""
        out = FieldState.zeros(self.space, "test")
        if J is not None:
            self._volume_load(J, out, nq)
        if g is not None:
            self._boundary_load(g, out, nq)
        return out

    def full_residual(self, U, J=None, g=None, nq=None):
        return self.apply(U) - self.load(J, g, nq)

    def matvec(self, u):
        """Linear part: ``B`` applied to the unknowns with zero initial data."""
        return self.apply(trial_from_vector(self.space, u, None)).to_vector()

    def rhs(self, init=None, J=None, g=None, nq=None):
        """``L - B(U_init)`` where ``U_init`` carries only the chained initial data."""
        b = self.load(J, g, nq).to_vector()
        if init is not None:
            u0 = trial_from_vector(self.space, np.zeros(self.space.n_unknowns), init)
            b -= self.apply(u0).to_vector()
        return b

    # -- preconditioner --------------------------------------------------------------------
    def apply_P(self, u):
        """Time-derivative part of the operator (mass blocks with chaining)."""
        lay = self.space.layout
        out = np.empty_like(u)
        for e in range(self.n):
            for f, M in ((0, self.M_E[e]), (1, self.M_H[e])):
                sl = lay.block(e, f)
                x = u[sl].reshape(lay.shapes[e])
                r = x.copy()
                r[1:, :, 0] -= x[:-1, :, 0]
                out[sl] = (M[None, :, None, None, None, None] * r).ravel()
        self.ws.add("precond", 3 * u.size)
        return out

    def precondition(self, r):
        """Exact inverse of ``apply_P``."""
        lay = self.space.layout
        out = np.empty_like(r)
        for e in range(self.n):
            for f, M in ((0, self.M_E[e]), (1, self.M_H[e])):
                sl = lay.block(e, f)
                x = r[sl].reshape(lay.shapes[e]) / M[None, :, None, None, None, None]
                x[:, :, 0] = np.cumsum(x[:, :, 0], axis=0)
                out[sl] = x.ravel()
        self.ws.add("precond", 2 * r.size)
        return out

    # -- dual norm --------------------------------------------------------------------------
    def dual_norms(self, r):
        """Unweighted L2 dual norms of the E and H residual functionals."""
        q = r * r / self.gram_vector
        return float(np.sqrt(np.sum(q[self.is_E]))), float(np.sqrt(np.sum(q[~self.is_E])))

    # -- loads -------------------------------------------------------------------------------
    def _volume_load(self, J, out, nq):
        sp, mesh = self.space, self.space.mesh
        for e in range(self.n):
            d = sp.degrees[e]
            h, detJ = mesh.element_jacobian(e)
            o = mesh.origin(e)
            tx, tw = b1.gauss_rule(nq or d.pt + 2)
            rules = [b1.gauss_rule(nq or p + 2) for p in d.spatial]
            pts = [o[a] + h[a] * rules[a][0] for a in range(3)]
            tabs = [b1.legendre_table(d.spatial[a], rules[a][0]) * rules[a][1] for a in range(3)]
            Lt = b1.legendre_table(d.pt - 1, tx) * tw
            tau = sp.tau(e)
            T, X, Y, Z = np.meshgrid(np.zeros(1), *pts, indexing="ij")
            for k, (ta, _) in enumerate(sp.partition.sub_intervals(e)):
                times = ta + tau * tx
                vals = np.stack([np.asarray(J(t, X[0], Y[0], Z[0]), dtype=float) for t in times], axis=1)
                scale = (detJ * tau / h)[:, None, None, None, None]
                mom = np.einsum("cqxyz,mq,ix,jy,kz->cmijk", vals * scale, Lt, *tabs, optimize=True)
                out.E[e][k] += mom
                self.ws.add("load", 2 * mom.size * vals.shape[1])

    def _boundary_load(self, g, out, nq):
        sp, mesh = self.space, self.space.mesh
        for plan in self.plans:
            if not plan.boundary:
                continue
            f = plan.face
            e = f.e1
            d = sp.degrees[e]
            h, _ = mesh.element_jacobian(e)
            o = mesh.origin(e)
            axis = f.axis
            t1, t2 = tangential_axes(axis)
            tx, tw = b1.gauss_rule(nq or d.pt + 2)
            r1 = b1.gauss_rule(nq or d.spatial[t1] + 2)
            r2 = b1.gauss_rule(nq or d.spatial[t2] + 2)
            coords = [None, None, None]
            coords[axis] = np.array([o[axis] + h[axis] * f.endpoint(0)])
            coords[t1] = o[t1] + h[t1] * r1[0]
            coords[t2] = o[t2] + h[t2] * r2[0]
            X, Y, Z = np.meshgrid(*coords, indexing="ij")
            shp = [len(c) for c in coords]
            sq = [n for i, n in enumerate(shp) if i != axis]
            tab1 = b1.legendre_table(d.spatial[t1], r1[0]) * r1[1]
            tab2 = b1.legendre_table(d.spatial[t2], r2[0]) * r2[1]
            Lt = b1.legendre_table(d.pt - 1, tx) * tw
            La = self._endpoint(d.spatial[axis], f.endpoint(0))
            tau = sp.tau(e)
            sigma = f.normal_sign(0)
            area = h[t1] * h[t2]
            for k, (ta, _) in enumerate(sp.partition.sub_intervals(e)):
                gv = np.stack([np.asarray(g(ta + tau * t, X, Y, Z), dtype=float).reshape(3, *sq)
                               for t in tx], axis=1)  # (3, q, s1, s2)
                # <g, n x w> = sigma eps_{c axis d} g_c w_d
                Gd = sigma * np.einsum("cd,cqab->dqab", LEVI[:, axis, :], gv)
                Gd = Gd * (area * tau / h)[:, None, None, None]
                mom = np.einsum("dqab,mq,ia,jb->dmij", Gd, Lt, tab1, tab2, optimize=True)
                self._scatter(out.H[e][k:k + 1], mom[None], axis, La)
                if self.diss.c > 0:
                    gt = gv.copy()
                    gt[axis] = 0.0
                    gt = plan.alpha_E * gt * (area * tau / h)[:, None, None, None]
                    mom = np.einsum("dqab,mq,ia,jb->dmij", gt, Lt, tab1, tab2, optimize=True)
                    self._scatter(out.E[e][k:k + 1], mom[None], axis, La)


def residual_vector(op, U, J=None, g=None):
    return op.full_residual(U, J, g).to_vector()


def test_state(op, r):
    return test_from_vector(op.space, r)
