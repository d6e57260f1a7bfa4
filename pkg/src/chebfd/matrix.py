"""Hermitian sparse matrices in compressed row storage.

Includes the "Topi" lattice generator (a 3D Wilson-Dirac stencil with four
orbitals per site), Gershgorin bounds, Matrix Market I/O and contiguous row
partitioning with halo lists.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import scipy.sparse as sp

__all__ = [
    "SparseMatrixCRS",
    "LatticeSpec",
    "PartitionPlan",
    "MatrixMarketError",
    "topi_generate",
    "gershgorin_bounds",
    "hermitian_defect",
    "read_matrix_market",
    "write_matrix_market",
    "matrix_market_io",
    "partition_rows",
]

Symmetry = Literal["hermitian", "general"]


@dataclass(frozen=True, eq=False)
class SparseMatrixCRS:
    """Complex sparse matrix in CRS format with 4-byte column indices.

    Instances are immutable after construction; the arrays are flagged
    read-only so a matrix can be shared between workers.
    """

    n: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    symmetry_flag: Symmetry = "general"

    def __post_init__(self):
        row_ptr = np.ascontiguousarray(self.row_ptr, dtype=np.int64)
        col_idx = np.ascontiguousarray(self.col_idx, dtype=np.int32)
        values = np.ascontiguousarray(self.values, dtype=np.complex128)
        if self.n < 1:
            raise ValueError("matrix dimension must be positive")
        if row_ptr.shape != (self.n + 1,):
            raise ValueError("row_ptr must have n+1 entries")
        if row_ptr[0] != 0 or np.any(np.diff(row_ptr) < 0):
            raise ValueError("row_ptr must start at 0 and be nondecreasing")
        if row_ptr[-1] != col_idx.size or col_idx.size != values.size:
            raise ValueError("row_ptr[n] must equal the number of stored entries")
        if col_idx.size and (col_idx.min() < 0 or col_idx.max() >= self.n):
            raise ValueError("column index out of range")
        if self.symmetry_flag not in ("hermitian", "general"):
            raise ValueError(f"unknown symmetry flag {self.symmetry_flag!r}")
        for a in (row_ptr, col_idx, values):
            a.flags.writeable = False
        object.__setattr__(self, "row_ptr", row_ptr)
        object.__setattr__(self, "col_idx", col_idx)
        object.__setattr__(self, "values", values)

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    @property
    def nnz_per_row(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    @classmethod
    def from_coo(cls, n, rows, cols, vals, symmetry_flag: Symmetry = "general"):
        """Build from triplets; duplicates are summed, rows sorted by column."""
        m = sp.coo_matrix(
            (np.asarray(vals, dtype=np.complex128), (np.asarray(rows), np.asarray(cols))),
            shape=(n, n),
        ).tocsr()
        m.sum_duplicates()
        m.sort_indices()
        return cls(n, m.indptr, m.indices, m.data, symmetry_flag)

    @classmethod
    def from_scipy(cls, m, symmetry_flag: Symmetry = "general"):
        m = sp.csr_matrix(m, dtype=np.complex128)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.indptr, m.indices, m.data, symmetry_flag)

    @classmethod
    def from_dense(cls, a, symmetry_flag: Symmetry = "general"):
        a = np.asarray(a, dtype=np.complex128)
        rows, cols = np.nonzero(a)
        return cls.from_coo(a.shape[0], rows, cols, a[rows, cols], symmetry_flag)

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (np.array(self.values), np.array(self.col_idx), np.array(self.row_ptr)),
            shape=(self.n, self.n),
        )

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def diagonal(self) -> np.ndarray:
        return self.to_scipy().diagonal()

    def same_as(self, other: "SparseMatrixCRS") -> bool:
        return (
            self.n == other.n
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
            and np.array_equal(self.values, other.values)
        )


def hermitian_defect(H: SparseMatrixCRS) -> float:
    """Return max |H - H^dagger| over all entries."""
    m = H.to_scipy()
    d = m - m.conj().T
    return float(np.max(np.abs(d.data))) if d.nnz else 0.0


# --------------------------------------------------------------------------
# Topi lattice generator

@dataclass(frozen=True)
class LatticeSpec:
    Nx: int
    Ny: int
    Nz: int
    mass: float = 1.0
    hop: float = 1.0
    boundary: Literal["periodic", "open"] = "periodic"
    seed: int = 0
    disorder: float = 0.0

    @property
    def n(self) -> int:
        return 4 * self.Nx * self.Ny * self.Nz

    @property
    def sites(self) -> int:
        return self.Nx * self.Ny * self.Nz


_BETA = np.diag([1.0, 1.0, -1.0, -1.0]).astype(np.complex128)
_SIGMA = (
    np.array([[0, 1], [1, 0]], dtype=np.complex128),
    np.array([[0, -1j], [1j, 0]], dtype=np.complex128),
    np.array([[1, 0], [0, -1]], dtype=np.complex128),
)
_ZERO2 = np.zeros((2, 2), dtype=np.complex128)
_ALPHA = tuple(np.block([[_ZERO2, s], [s, _ZERO2]]) for s in _SIGMA)


def _hop_block(d: int, t: float) -> np.ndarray:
    return 0.5 * t * (_BETA + 1j * _ALPHA[d])


def topi_generate(spec: LatticeSpec) -> SparseMatrixCRS:
    """Generate the Topi-Nx-Ny-Nz Hermitian test matrix.

    Sites are numbered x-fastest, then y, then z; row ``4*site + orbital``.
    Each site couples to itself through ``mass * diag(1, 1, -1, -1)`` and to
    its six nearest neighbours through ``hop/2 * (B + i A_d)`` (and its
    adjoint for the backward direction), giving 13 nonzeros per interior row.
    """
    dims = (spec.Nx, spec.Ny, spec.Nz)
    if any(int(e) != e or e < 1 for e in dims):
        raise ValueError(f"lattice extents must be positive integers, got {dims}")
    if spec.boundary not in ("periodic", "open"):
        raise ValueError(f"unknown boundary {spec.boundary!r}")
    Nx, Ny, Nz = dims
    nsites = Nx * Ny * Nz
    site = np.arange(nsites, dtype=np.int64)
    x, y, z = site % Nx, (site // Nx) % Ny, site // (Nx * Ny)

    rows, cols, vals = [], [], []

    def add_block(src, dst, block):
        bi, bj = np.nonzero(block)
        for a, b in zip(bi, bj):
            rows.append(4 * src + a)
            cols.append(4 * dst + b)
            vals.append(np.full(src.size, block[a, b]))

    onsite = spec.mass * _BETA
    add_block(site, site, onsite)
    if spec.disorder:
        rng = np.random.default_rng(spec.seed)
        eps = spec.disorder * (rng.random(nsites) - 0.5)
        for a in range(4):
            rows.append(4 * site + a)
            cols.append(4 * site + a)
            vals.append(eps.astype(np.complex128))

    coords = (x, y, z)
    for d in range(3):
        ext = dims[d]
        shifted = list(coords)
        nxt = coords[d] + 1
        if spec.boundary == "periodic":
            keep = np.ones(nsites, dtype=bool)
            nxt = nxt % ext
        else:
            keep = nxt < ext
        shifted[d] = nxt
        nbr = shifted[0] + Nx * (shifted[1] + Ny * shifted[2])
        src, dst = site[keep], nbr[keep]
        block = _hop_block(d, spec.hop)
        add_block(src, dst, block)
        add_block(dst, src, block.conj().T)

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    H = SparseMatrixCRS.from_coo(4 * nsites, rows, cols, vals, "hermitian")
    return H


def gershgorin_bounds(H: SparseMatrixCRS) -> tuple[float, float]:
    """Gershgorin enclosure [min(Re a_ii - r_i), max(Re a_ii + r_i)]."""
    if H.symmetry_flag != "hermitian":
        raise ValueError("gershgorin_bounds requires a matrix flagged hermitian")
    m = H.to_scipy()
    diag = m.diagonal()
    radius = np.asarray(abs(m).sum(axis=1)).ravel() - np.abs(diag)
    radius = np.maximum(radius, 0.0)
    return float(np.min(diag.real - radius)), float(np.max(diag.real + radius))


# --------------------------------------------------------------------------
# Matrix Market I/O

class MatrixMarketError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def write_matrix_market(path, H: SparseMatrixCRS) -> None:
    """Write H as ``matrix coordinate complex`` (lower triangle if hermitian)."""
    m = H.to_scipy().tocoo()
    rows, cols, vals = m.row, m.col, m.data
    if H.symmetry_flag == "hermitian":
        keep = rows >= cols
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
    order = np.lexsort((rows, cols))
    lines = [
        f"%%MatrixMarket matrix coordinate complex {H.symmetry_flag}",
        f"{H.n} {H.n} {rows.size}",
    ]
    lines.extend(
        f"{r + 1} {c + 1} {v.real!r} {v.imag!r}"
        for r, c, v in zip(rows[order], cols[order], vals[order].tolist())
    )
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix_market(path) -> SparseMatrixCRS:
    """Parse a ``matrix coordinate complex`` file with general/hermitian symmetry."""
    with open(path) as fh:
        text = fh.read().splitlines()
    if not text:
        raise MatrixMarketError("empty file", 1)
    header = text[0].split()
    if (
        len(header) != 5
        or header[0] != "%%MatrixMarket"
        or [h.lower() for h in header[1:4]] != ["matrix", "coordinate", "complex"]
    ):
        raise MatrixMarketError("expected '%%MatrixMarket matrix coordinate complex <symmetry>'", 1)
    symmetry = header[4].lower()
    if symmetry not in ("general", "hermitian"):
        raise MatrixMarketError(f"unsupported symmetry {header[4]!r}", 1)

    lineno = 1
    size = None
    rows, cols, vals = [], [], []
    for lineno, raw in enumerate(text[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("%"):
            continue
        parts = line.split()
        if size is None:
            try:
                nr, nc, nnz = (int(p) for p in parts)
            except ValueError:
                raise MatrixMarketError("malformed size line", lineno) from None
            if nr != nc or nr < 1 or nnz < 0:
                raise MatrixMarketError("size line must describe a square matrix", lineno)
            size = (nr, nnz)
            continue
        if len(parts) != 4:
            raise MatrixMarketError("expected 'row col re im'", lineno)
        try:
            i, j = int(parts[0]), int(parts[1])
            re, im = float(parts[2]), float(parts[3])
        except ValueError:
            raise MatrixMarketError("malformed entry", lineno) from None
        n = size[0]
        if not (1 <= i <= n and 1 <= j <= n):
            raise MatrixMarketError(f"index ({i},{j}) outside {n}x{n} matrix", lineno)
        if not (math.isfinite(re) and math.isfinite(im)):
            raise MatrixMarketError("non-finite value", lineno)
        if symmetry == "hermitian":
            if j > i:
                raise MatrixMarketError("hermitian file must store the lower triangle", lineno)
            if i == j and im != 0.0:
                raise MatrixMarketError("hermitian diagonal entry must be real", lineno)
        rows.append(i - 1)
        cols.append(j - 1)
        vals.append(complex(re, im))
    if size is None:
        raise MatrixMarketError("missing size line", lineno)
    if len(vals) != size[1]:
        raise MatrixMarketError(f"expected {size[1]} entries, found {len(vals)}", lineno)

    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.complex128)
    if symmetry == "hermitian":
        off = rows != cols
        rows, cols, vals = (
            np.concatenate([rows, cols[off]]),
            np.concatenate([cols, rows[off]]),
            np.concatenate([vals, vals[off].conj()]),
        )
    return SparseMatrixCRS.from_coo(size[0], rows, cols, vals, symmetry)


def matrix_market_io(path, mode: Literal["read", "write"], H: SparseMatrixCRS | None = None):
    if mode == "read":
        return read_matrix_market(path)
    if mode == "write":
        if H is None:
            raise ValueError("write mode needs a matrix")
        write_matrix_market(path, H)
        return None
    raise ValueError(f"unknown mode {mode!r}")


# --------------------------------------------------------------------------
# Row partitioning

@dataclass
class PartitionPlan:
    """Contiguous row ownership plus per-neighbour halo lists.

    ``halo_in[w][v]`` holds the sorted global rows worker ``w`` receives from
    ``v``; ``halo_out[w][v]`` the rows ``w`` sends to ``v``.
    """

    worker_count: int
    row_ranges: list[tuple[int, int]]
    halo_in: list[dict[int, np.ndarray]] = field(default_factory=list)
    halo_out: list[dict[int, np.ndarray]] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.row_ranges[-1][1]

    def owner(self, rows) -> np.ndarray:
        starts = np.array([r[0] for r in self.row_ranges])
        return np.searchsorted(starts, np.asarray(rows), side="right") - 1

    def halo_rows(self, w: int) -> np.ndarray:
        """All halo rows of worker w in receive order (by neighbour rank)."""
        parts = [self.halo_in[w][v] for v in sorted(self.halo_in[w])]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def partition_rows(H: SparseMatrixCRS, workers: int, site_rows: int | None = None) -> PartitionPlan:
    """Split rows into ``workers`` balanced contiguous ranges.

    Ranges are multiples of ``site_rows`` (4 for lattice matrices) so no
    lattice site is split; range sizes differ by at most one site.
    """
    if site_rows is None:
        site_rows = 4 if H.n % 4 == 0 else 1
    nsites = H.n // site_rows
    if int(workers) != workers or workers < 1:
        raise ValueError("workers must be a positive integer")
    if workers > nsites:
        raise ValueError(f"workers={workers} exceeds the number of lattice sites ({nsites})")
    base, extra = divmod(nsites, workers)
    bounds = [0]
    for w in range(workers):
        bounds.append(bounds[-1] + (base + (1 if w < extra else 0)) * site_rows)
    ranges = [(bounds[w], bounds[w + 1]) for w in range(workers)]

    plan = PartitionPlan(workers, ranges)
    plan.halo_in = [dict() for _ in range(workers)]
    plan.halo_out = [dict() for _ in range(workers)]
    for w, (lo, hi) in enumerate(ranges):
        cols = np.unique(H.col_idx[H.row_ptr[lo]:H.row_ptr[hi]]).astype(np.int64)
        remote = cols[(cols < lo) | (cols >= hi)]
        owners = plan.owner(remote)
        for v in np.unique(owners):
            rows = remote[owners == v]
            plan.halo_in[w][int(v)] = rows
            plan.halo_out[int(v)][w] = rows
    return plan
