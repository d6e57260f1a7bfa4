"""Shifted SpMMV and the fused Chebyshev filter step.

All kernels operate on single panels (``n x n_b`` row-major arrays). The
matrix operand only needs ``row_ptr``, ``col_idx`` and ``values`` so local
row slices of a distributed matrix (rectangular, with halo columns) work the
same way as a full :class:`~chebfd.matrix.SparseMatrixCRS`.

Moment reductions use a fixed chunking of rows followed by a pairwise tree,
so results are bit-identical for any thread count.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import njit, prange

from .blockvec import SubblockView

__all__ = [
    "ShiftScale",
    "MomentSeries",
    "TrafficCounter",
    "REDUCTION_CHUNK",
    "spmmv_shifted",
    "cheb_init",
    "chebfd_op",
    "chebfd_op_reference",
    "set_threads",
    "tree_sum",
]

REDUCTION_CHUNK = 64


@dataclass(frozen=True)
class ShiftScale:
    """Affine map ``H -> alpha*H + beta``."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not np.isfinite(self.alpha) or not np.isfinite(self.beta):
            raise ValueError("alpha and beta must be finite")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")

    def __call__(self, lam):
        return self.alpha * np.asarray(lam) + self.beta


@dataclass
class MomentSeries:
    """Per-degree, per-column Chebyshev moments for degrees ``3..n_p``.

    Row ``p - 3`` of ``eta``/``mu`` holds degree ``p``.
    """

    n_p: int
    n_s: int
    eta: np.ndarray = field(default=None)
    mu: np.ndarray = field(default=None)

    def __post_init__(self):
        rows = max(self.n_p - 2, 0)
        if self.eta is None:
            self.eta = np.zeros((rows, self.n_s), dtype=np.complex128)
        if self.mu is None:
            self.mu = np.zeros((rows, self.n_s), dtype=np.complex128)

    @property
    def degrees(self) -> range:
        return range(3, self.n_p + 1)

    def row(self, p: int) -> int:
        if not 3 <= p <= self.n_p:
            raise ValueError(f"degree {p} outside moment table [3, {self.n_p}]")
        return p - 3

    def store(self, p: int, cols, eta, mu) -> None:
        r = self.row(p)
        self.eta[r, cols] = eta
        self.mu[r, cols] = mu

    def __add__(self, other: "MomentSeries") -> "MomentSeries":
        return MomentSeries(self.n_p, self.n_s, self.eta + other.eta, self.mu + other.mu)


@dataclass
class TrafficCounter:
    """Debug counters of panel sweeps and matrix sweeps."""

    panel_reads: int = 0
    panel_writes: int = 0
    matrix_sweeps: int = 0
    read_bytes: int = 0
    write_bytes: int = 0

    def read(self, panel: np.ndarray, count: int = 1):
        self.panel_reads += count
        self.read_bytes += count * panel.nbytes

    def write(self, panel: np.ndarray, count: int = 1):
        self.panel_writes += count
        self.write_bytes += count * panel.nbytes

    def sweep(self, H):
        self.matrix_sweeps += 1
        self.read_bytes += H.values.nbytes + H.col_idx.nbytes

    def reset(self):
        self.panel_reads = self.panel_writes = self.matrix_sweeps = 0
        self.read_bytes = self.write_bytes = 0


def set_threads(count: int | None = None) -> int:
    """Cap kernel parallelism (defaults to ``CHEBFILTER_THREADS`` if set)."""
    if count is None:
        env = os.environ.get("CHEBFILTER_THREADS")
        if not env:
            return numba.get_num_threads()
        count = int(env)
    count = max(1, min(int(count), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(count)
    return count


def tree_sum(parts: np.ndarray) -> np.ndarray:
    """Pairwise sum over axis 0 with a shape-determined tree."""
    parts = np.asarray(parts)
    if parts.shape[0] == 0:
        return np.zeros(parts.shape[1:], dtype=parts.dtype)
    while parts.shape[0] > 1:
        half = parts.shape[0] // 2
        paired = parts[0:2 * half:2] + parts[1:2 * half:2]
        if parts.shape[0] % 2:
            paired = np.concatenate([paired, parts[-1:]])
        parts = paired
    return parts[0].copy()


# --------------------------------------------------------------------------
# numba kernels

@njit(parallel=True, cache=True)
def _spmmv_kernel(row_ptr, col_idx, vals, alpha, beta, x, y, z, two_minus):
    nrows = row_ptr.size - 1
    nb = x.shape[1]
    for i in prange(nrows):
        acc = np.zeros(nb, dtype=np.complex128)
        for k in range(row_ptr[i], row_ptr[i + 1]):
            v = vals[k]
            c = col_idx[k]
            for j in range(nb):
                acc[j] += v * x[c, j]
        for j in range(nb):
            t = alpha * acc[j] + beta * x[i, j]
            if two_minus:
                y[i, j] = 2.0 * t - z[i, j]
            else:
                y[i, j] = t


@njit(parallel=True, cache=True)
def _chebfd_kernel(row_ptr, col_idx, vals, alpha, beta, u, w, x, gc, chunk, eta_part, mu_part):
    nrows = row_ptr.size - 1
    nb = u.shape[1]
    nchunks = eta_part.shape[0]
    for ck in prange(nchunks):
        lo = ck * chunk
        hi = min(lo + chunk, nrows)
        acc = np.zeros(nb, dtype=np.complex128)
        for i in range(lo, hi):
            for j in range(nb):
                acc[j] = 0.0
            for k in range(row_ptr[i], row_ptr[i + 1]):
                v = vals[k]
                c = col_idx[k]
                for j in range(nb):
                    acc[j] += v * u[c, j]
            for j in range(nb):
                ui = u[i, j]
                wn = 2.0 * (alpha * acc[j] + beta * ui) - w[i, j]
                eta_part[ck, j] += np.conj(wn) * ui
                mu_part[ck, j] += np.conj(ui) * ui
                w[i, j] = wn
                x[i, j] += gc * wn


# --------------------------------------------------------------------------
# Python entry points

def _panel(v) -> np.ndarray:
    return v.array if isinstance(v, SubblockView) else v


def _nrows(H) -> int:
    return H.row_ptr.size - 1


def _check_panels(H, *panels):
    nrows = _nrows(H)
    nb = panels[0].shape[1]
    for p in panels:
        if p.ndim != 2 or p.shape[1] != nb or p.shape[0] < nrows:
            raise ValueError(f"panel shape {p.shape} incompatible with {nrows} rows, n_b={nb}")
        if p.dtype != np.complex128:
            raise ValueError("panels must be complex128")


def spmmv_shifted(H, s: ShiftScale, X_b, Y_b, accumulate=None, counter: TrafficCounter | None = None):
    """``Y = (alpha H + beta) X`` or, with ``accumulate=Z``, ``Y = 2 (alpha H + beta) X - Z``.

    ``Z`` may be ``Y`` itself (the in-place recurrence update).
    """
    x, y = _panel(X_b), _panel(Y_b)
    z = y if accumulate is None else _panel(accumulate)
    _check_panels(H, x, y, z)
    if np.may_share_memory(x, y) or (accumulate is not None and np.may_share_memory(x, z)):
        raise ValueError("input and output panels of spmmv_shifted must not alias")
    if x.shape[0] < int(H.col_idx.max(initial=-1)) + 1:
        raise ValueError("input panel has fewer rows than matrix columns")
    _spmmv_kernel(H.row_ptr, H.col_idx, H.values, float(s.alpha), float(s.beta),
                  x, y, z, accumulate is not None)
    if counter is not None:
        counter.sweep(H)
        counter.read(x)
        if accumulate is not None:
            counter.read(z)
        counter.write(y)


def cheb_init(H, s: ShiftScale, X_b, U_b, W_b, coeffs, counter: TrafficCounter | None = None):
    """First three recurrence steps for one panel.

    On return ``U = T_1 X0``, ``W = T_2 X0`` and
    ``X = g0 c0 X0 + g1 c1 U + g2 c2 W`` where ``X0`` is the input ``X``.
    """
    x, u, w = _panel(X_b), _panel(U_b), _panel(W_b)
    if not (x.shape == u.shape == w.shape):
        raise ValueError("X, U and W panels must have the same shape")
    gc = coeffs.gc
    if gc.size < 3:
        raise ValueError("coefficients must cover degrees 0..2")
    spmmv_shifted(H, s, x, u, counter=counter)
    spmmv_shifted(H, s, u, w, accumulate=x, counter=counter)
    n = _nrows(H)
    x[:n] = gc[0] * x[:n] + gc[1] * u[:n] + gc[2] * w[:n]
    if counter is not None:
        for p in (x, u, w):
            counter.read(p)
        counter.write(x)


def _moment_target(out, p, U_b, col0):
    if out is None:
        return None
    if col0 is None:
        if not isinstance(U_b, SubblockView):
            raise ValueError("col0 is required when panels are passed as arrays")
        col0 = U_b.b * U_b.parent.n_b
    out.row(p)
    return col0


def chebfd_op(H, s: ShiftScale, U_b, W_b, X_b, p: int, gc: complex, out: MomentSeries | None = None,
              col0: int | None = None, counter: TrafficCounter | None = None):
    """Fused degree-``p`` filter step on one panel.

    Computes ``W <- 2 (alpha H + beta) U - W`` row by row and, in the same
    pass, the moments ``eta = <W_new, U>``, ``mu = <U, U>`` (conjugate on the
    first argument) and ``X <- X + gc * W_new``. Returns ``(eta, mu)`` and
    stores them in ``out`` when given.
    """
    if p < 3:
        raise ValueError("chebfd_op handles degrees p >= 3")
    u, w, x = _panel(U_b), _panel(W_b), _panel(X_b)
    _check_panels(H, u, w, x)
    if not (u.shape == w.shape == x.shape):
        raise ValueError("U, W and X panels must have the same shape")
    if np.may_share_memory(u, w) or np.may_share_memory(u, x) or np.may_share_memory(w, x):
        raise ValueError("U, W and X panels must be distinct")
    col0 = _moment_target(out, p, U_b, col0)
    nrows = _nrows(H)
    nb = u.shape[1]
    nchunks = -(-nrows // REDUCTION_CHUNK)
    eta_part = np.zeros((nchunks, nb), dtype=np.complex128)
    mu_part = np.zeros((nchunks, nb), dtype=np.complex128)
    _chebfd_kernel(H.row_ptr, H.col_idx, H.values, float(s.alpha), float(s.beta),
                   u, w, x, complex(gc), REDUCTION_CHUNK, eta_part, mu_part)
    eta, mu = tree_sum(eta_part), tree_sum(mu_part)
    if out is not None:
        out.store(p, slice(col0, col0 + nb), eta, mu)
    if counter is not None:
        counter.sweep(H)
        for a in (u, w, x):
            counter.read(a)
        counter.write(w)
        counter.write(x)
    return eta, mu


def chebfd_op_reference(H, s: ShiftScale, U_b, W_b, X_b, p: int, gc: complex,
                        out: MomentSeries | None = None, col0: int | None = None,
                        counter: TrafficCounter | None = None):
    """Unfused degree-``p`` step built from separate library-style passes.

    Uses scipy's sparse product, column-wise dot products and an axpy; it is
    the oracle for :func:`chebfd_op`.
    """
    import scipy.sparse as sp

    if p < 3:
        raise ValueError("chebfd_op_reference handles degrees p >= 3")
    u, w, x = _panel(U_b), _panel(W_b), _panel(X_b)
    _check_panels(H, u, w, x)
    if not (u.shape == w.shape == x.shape):
        raise ValueError("U, W and X panels must have the same shape")
    col0 = _moment_target(out, p, U_b, col0)
    nrows = _nrows(H)
    A = sp.csr_matrix((H.values, H.col_idx, H.row_ptr), shape=(nrows, u.shape[0]))
    # spmmv
    w[:nrows] = 2.0 * (s.alpha * (A @ u) + s.beta * u[:nrows]) - w[:nrows]
    # dot products
    eta = np.einsum("ij,ij->j", w[:nrows].conj(), u[:nrows])
    mu = np.einsum("ij,ij->j", u[:nrows].conj(), u[:nrows])
    # axpy
    x[:nrows] += gc * w[:nrows]
    if out is not None:
        out.store(p, slice(col0, col0 + u.shape[1]), eta, mu)
    if counter is not None:
        counter.sweep(H)
        counter.read(u)
        counter.read(w)
        counter.write(w)
        counter.read(w)
        counter.read(u)
        counter.read(u)
        counter.read(w)
        counter.read(x)
        counter.write(x)
    return eta, mu
