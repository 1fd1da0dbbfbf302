"""One-dimensional polynomial machinery on the unit interval.

All Legendre polynomials here are orthonormal on ``[0, 1]``::

    L_n(x) = sqrt(2n + 1) * P_n(2x - 1)

and the integrated family used for the temporal trial basis is

    l_0 = 1 - x,  l_1 = x,  l_i(x) = int_0^x L_{i-1}(s) ds   (i >= 2).

With this convention the spatial mass matrix on a brick is diagonal and every
1D coupling matrix consumed by the tensor-product kernels is convention free.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

DEFAULT_MAX_DEGREE = 12


def _check_degree(i, max_degree=None):
    if i < 0 or (max_degree is not None and i > max_degree):
        raise ValueError(f"degree {i} out of range")


def _plain_legendre(p, xi):
    """Unnormalised Legendre P_0..P_p at points ``xi`` in [-1, 1]."""
    xi = np.asarray(xi, dtype=float)
    out = np.empty((p + 1,) + xi.shape)
    out[0] = 1.0
    if p >= 1:
        out[1] = xi
    for n in range(1, p):
        out[n + 1] = ((2 * n + 1) * xi * out[n] - n * out[n - 1]) / (n + 1)
    return out


def legendre_table(p, x):
    """Values ``L_0..L_p`` at ``x``; shape ``(p + 1,) + x.shape``."""
    x = np.asarray(x, dtype=float)
    P = _plain_legendre(p, 2.0 * x - 1.0)
    scale = np.sqrt(2.0 * np.arange(p + 1) + 1.0)
    return P * scale.reshape((-1,) + (1,) * x.ndim)


def legendre_deriv_table(p, x):
    """Derivatives ``L_0'..L_p'`` at ``x`` (with respect to x on [0, 1])."""
    x = np.asarray(x, dtype=float)
    L = legendre_table(p, x)
    out = np.zeros_like(L)
    for n in range(1, p + 1):
        for k in range(n - 1, -1, -2):
            out[n] += 2.0 * math.sqrt((2 * n + 1) * (2 * k + 1)) * L[k]
    return out


def ilegendre_table(p, x):
    """Values ``l_0..l_p`` of the integrated Legendre family at ``x``."""
    x = np.asarray(x, dtype=float)
    P = _plain_legendre(max(p, 1), 2.0 * x - 1.0)
    out = np.empty((p + 1,) + x.shape)
    out[0] = 1.0 - x
    if p >= 1:
        out[1] = x
    for i in range(2, p + 1):
        out[i] = (P[i] - P[i - 2]) / (2.0 * math.sqrt(2 * i - 1))
    return out


def ilegendre_deriv_table(p, x):
    x = np.asarray(x, dtype=float)
    out = np.empty((p + 1,) + x.shape)
    out[0] = -1.0
    if p >= 1:
        out[1] = 1.0
    if p >= 2:
        out[2:] = legendre_table(p - 1, x)[1:p]
    return out


def legendre_eval(i, x, max_degree=DEFAULT_MAX_DEGREE):
    """Orthonormal Legendre polynomial of degree ``i`` on [0, 1]."""
    _check_degree(i, max_degree)
    return float(legendre_table(i, x)[i]) if np.ndim(x) == 0 else legendre_table(i, x)[i]


def ilegendre_eval(i, x, max_degree=DEFAULT_MAX_DEGREE):
    """Integrated Legendre polynomial ``l_i`` on [0, 1]."""
    _check_degree(i, max_degree)
    v = ilegendre_table(i, x)[i]
    return float(v) if np.ndim(x) == 0 else v


@lru_cache(maxsize=None)
def _gauss(n):
    xi, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (xi + 1.0)
    w = 0.5 * w
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gauss_rule(n):
    """n-point Gauss-Legendre rule on [0, 1]; exact up to degree 2n - 1."""
    if n < 1:
        raise ValueError("Gauss rule needs at least one point")
    return _gauss(int(n))


def _product_points(p_row, p_col):
    return math.ceil((p_row + p_col) / 2) + 1


def subinterval_transfer_matrix(p_row, p_col, s=1.0, b=0.0, interval=(0.0, 1.0)):
    """Moments ``A[n, j] = int_I L_j(s x + b) L_n(x) dx``.

    ``I`` is a sub-interval of [0, 1] in the row (test) coordinates and
    ``x -> s x + b`` maps it into the column (trial) reference interval.
    The conforming case (s = 1, b = 0, I = [0, 1]) returns the exact
    rectangular identity so callers can skip the contraction.
    """
    lo, hi = interval
    if s == 1.0 and b == 0.0 and lo == 0.0 and hi == 1.0:
        return np.eye(p_row + 1, p_col + 1)
    tol = 1e-12
    ends = (s * lo + b, s * hi + b)
    if min(ends) < -tol or max(ends) > 1.0 + tol or lo < -tol or hi > 1.0 + tol:
        raise ValueError(f"mapped interval {ends} escapes [0, 1]")
    x, w = gauss_rule(_product_points(p_row, p_col))
    xq = lo + (hi - lo) * x
    wq = (hi - lo) * w
    Lr = legendre_table(p_row, xq)
    Lc = legendre_table(p_col, np.clip(s * xq + b, 0.0, 1.0))
    return (Lr * wq) @ Lc.T


def is_identity_transfer(s, b, interval):
    return s == 1.0 and b == 0.0 and tuple(interval) == (0.0, 1.0)


def coupling_matrix(p):
    """``D[i, m] = int_0^1 L_i l_m'`` for i < p, m <= p; shape (p, p+1)."""
    if p < 1:
        raise ValueError("coupling matrix needs degree >= 1")
    x, w = gauss_rule(_product_points(p, p) + 1)
    return (legendre_table(p - 1, x) * w) @ ilegendre_deriv_table(p, x).T


def temporal_mass(p_rows, p):
    """``T[i, m] = int_0^1 L_i l_m`` for i <= p_rows, m <= p."""
    x, w = gauss_rule(_product_points(p_rows, p) + 1)
    return (legendre_table(p_rows, x) * w) @ ilegendre_table(p, x).T


def conversion_matrix(p):
    """Legendre coefficients of ``l_0..l_p``: ``l_m = sum_j C[j, m] L_j``."""
    return temporal_mass(p, p)


def trial_to_test_projection_matrix(p_t):
    """L2 projection of a degree-``p_t`` integrated-Legendre expansion onto
    Legendre modes ``0..p_t-1`` of the same interval; shape (p_t, p_t+1)."""
    if p_t < 1:
        raise ValueError("p_t must be at least 1")
    return conversion_matrix(p_t)[:p_t]


def temporal_mass_nonzeros(p_t):
    """Sparse entries ``(row, col, value)`` of ``T`` restricted to test rows
    ``0..p_t-1``; two nonzeros per column for columns >= 2."""
    T = trial_to_test_projection_matrix(p_t)
    out = []
    for m in range(p_t + 1):
        rows = (0, 1) if m < 2 else (m - 2, m)
        for i in rows:
            if i < p_t:
                out.append((i, m, float(T[i, m])))
    return out


# -- fast derivative application ------------------------------------------

def _parity_suffix(w, axis):
    """``A[k] = w[k] + w[k+2] + ...`` along ``axis``."""
    w = np.moveaxis(w, axis, 0)
    A = np.empty_like(w)
    n = w.shape[0]
    for start in (n - 1, n - 2):
        if start < 0:
            continue
        idx = slice(start, None, -2)
        A[idx] = np.cumsum(w[idx], axis=0)
    return np.moveaxis(A, 0, axis)


def _parity_prefix(w, axis):
    """``B[k] = w[k] + w[k-2] + ...`` along ``axis``."""
    w = np.moveaxis(w, axis, 0)
    B = np.empty_like(w)
    for start in (0, 1):
        if start >= w.shape[0]:
            continue
        B[start::2] = np.cumsum(w[start::2], axis=0)
    return np.moveaxis(B, 0, axis)


@lru_cache(maxsize=None)
def _sqrt_odd(n):
    return np.sqrt(2.0 * np.arange(n) + 1.0)


def apply_derivative(c, axis):
    """Legendre coefficients of d/dx of the expansion ``c`` along ``axis``.

    Uses the parity structure of ``L_k' = sum 2 sqrt((2k+1)(2n+1)) L_n``
    (n < k, k - n odd); linear cost per line.
    """
    n = c.shape[axis]
    shape = [1] * c.ndim
    shape[axis] = n
    s = _sqrt_odd(n).reshape(shape)
    A = _parity_suffix(c * s, axis)
    out = np.zeros_like(c)
    if n > 1:
        dst = [slice(None)] * c.ndim
        src = [slice(None)] * c.ndim
        dst[axis] = slice(0, n - 1)
        src[axis] = slice(1, n)
        out[tuple(dst)] = A[tuple(src)]
    return 2.0 * s * out


def apply_derivative_transpose(c, axis):
    """Transpose of :func:`apply_derivative` with respect to the coefficient
    dot product."""
    n = c.shape[axis]
    shape = [1] * c.ndim
    shape[axis] = n
    s = _sqrt_odd(n).reshape(shape)
    B = _parity_prefix(c * s, axis)
    out = np.zeros_like(c)
    if n > 1:
        dst = [slice(None)] * c.ndim
        src = [slice(None)] * c.ndim
        dst[axis] = slice(1, n)
        src[axis] = slice(0, n - 1)
        out[tuple(dst)] = B[tuple(src)]
    return 2.0 * s * out


def derivative_matrix(p):
    """Dense ``G[n, k] = int_0^1 L_n L_k'``; used by tests and small solves."""
    return apply_derivative(np.eye(p + 1), 0)


# -- tables ----------------------------------------------------------------

@dataclass(frozen=True)
class Basis1DTables:
    """Precomputed 1D data for all degrees up to ``max_degree``."""

    max_degree: int = DEFAULT_MAX_DEGREE
    n_rules: int = 0
    gauss: dict = field(default_factory=dict, repr=False)
    coupling: dict = field(default_factory=dict, repr=False)
    tmass: dict = field(default_factory=dict, repr=False)
    conversion: dict = field(default_factory=dict, repr=False)
    tmass_nz: dict = field(default_factory=dict, repr=False)
    L0: np.ndarray = field(default=None, repr=False)
    L1: np.ndarray = field(default=None, repr=False)

    @classmethod
    def build(cls, max_degree=DEFAULT_MAX_DEGREE):
        p = max_degree
        gauss = {n: gauss_rule(n) for n in range(1, p + 4)}
        coupling = {q: coupling_matrix(q) for q in range(1, p + 1)}
        conv = {q: conversion_matrix(q) for q in range(1, p + 1)}
        tmass = {q: conv[q][:q] for q in conv}
        nz = {q: temporal_mass_nonzeros(q) for q in range(1, p + 1)}
        ends = legendre_table(p, np.array([0.0, 1.0]))
        return cls(max_degree=p, n_rules=p + 3, gauss=gauss, coupling=coupling,
                   tmass=tmass, conversion=conv, tmass_nz=nz,
                   L0=ends[:, 0].copy(), L1=ends[:, 1].copy())

    def legendre_at_nodes(self, p, n):
        return legendre_table(p, self.gauss[n][0])

    def ilegendre_at_nodes(self, p, n):
        return ilegendre_table(p, self.gauss[n][0])

    def endpoint(self, p, side):
        """``L_0..L_p`` evaluated at 0 (side=0) or 1 (side=1)."""
        return (self.L1 if side else self.L0)[:p + 1]


@lru_cache(maxsize=4)
def default_tables(max_degree=DEFAULT_MAX_DEGREE):
    return Basis1DTables.build(max_degree)


# -- piecewise polynomial spaces on an interval ------------------------------

class Space1D:
    """Piecewise polynomials of degree ``p`` on the cells ``breaks``.

    Discontinuous spaces use per-cell Legendre modes; continuous spaces use
    nodal hats plus integrated-Legendre bubbles, ordered as
    ``[node 0..N] + [bubbles of cell 0] + [bubbles of cell 1] + ...``.
    """

    def __init__(self, breaks, degree, continuous=False):
        self.breaks = np.asarray(breaks, dtype=float)
        self.degree = int(degree)
        self.continuous = bool(continuous)
        if self.continuous and self.degree < 1:
            raise ValueError("continuous space needs degree >= 1")
        self.n_cells = len(self.breaks) - 1

    @property
    def ndofs(self):
        p, N = self.degree, self.n_cells
        return N + 1 + N * (p - 1) if self.continuous else N * (p + 1)

    def cell_dofs(self, k):
        p, N = self.degree, self.n_cells
        if not self.continuous:
            return np.arange(k * (p + 1), (k + 1) * (p + 1))
        return np.array([k, k + 1] + [N + 1 + k * (p - 1) + j for j in range(p - 1)])

    def local_values(self, xhat):
        if self.continuous:
            return ilegendre_table(self.degree, xhat)
        return legendre_table(self.degree, xhat)

    def evaluate(self, x):
        """Basis values at physical points ``x``; shape (len(x), ndofs)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.zeros((x.size, self.ndofs))
        k = np.clip(np.searchsorted(self.breaks, x, side="right") - 1, 0, self.n_cells - 1)
        for c in np.unique(k):
            sel = k == c
            a, b = self.breaks[c], self.breaks[c + 1]
            vals = self.local_values((x[sel] - a) / (b - a))
            out[np.ix_(sel, self.cell_dofs(c))] += vals.T
        return out


def _common_breaks(*spaces):
    br = np.unique(np.concatenate([s.breaks for s in spaces]))
    keep = np.concatenate([[True], np.diff(br) > 1e-14 * max(1.0, abs(br[-1]))])
    return br[keep]


def cross_gram(A, B):
    """``X[a, b] = int phi^A_a phi^B_b`` over the common domain."""
    br = _common_breaks(A, B)
    n = _product_points(A.degree, B.degree)
    xg, wg = gauss_rule(n)
    x = (br[:-1, None] + np.diff(br)[:, None] * xg).ravel()
    w = (np.diff(br)[:, None] * wg).ravel()
    return (A.evaluate(x) * w[:, None]).T @ B.evaluate(x)


def gram(A):
    return cross_gram(A, A)


def projection_matrix(source, target):
    """Coefficients in ``target`` of the L2 projection of ``source`` functions."""
    return np.linalg.solve(gram(target), cross_gram(target, source))
