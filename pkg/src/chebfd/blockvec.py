"""Block vectors stored as column-ordered panels of row-major subblocks.

A block vector of ``n_s`` columns is split into ``n_s // n_b`` panels. Each
panel holds ``n_b`` columns stored row-major (``n x n_b``), and panels follow
one another in memory. Element ``(i, j)`` therefore lives at linear offset::

    (j // n_b) * n * n_b + i * n_b + j % n_b
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = [
    "BlockVector",
    "SubblockView",
    "create_block_vector",
    "subblock_view",
    "swap_blocks",
    "swap_vectors",
    "element_access",
    "seeded_normal",
    "save_block_vector",
    "load_block_vector",
]

MAGIC = b"CFDB"
FORMAT_VERSION = 1
LAYOUT_PANEL_ROW_MAJOR = 0


class BlockVector:
    """``n x n_s`` complex block vector in panel layout.

    Panels are kept in a slot table so that :func:`swap_blocks` can exchange
    two panels by swapping table entries instead of copying elements.
    """

    def __init__(self, n: int, n_s: int, n_b: int, buffer: np.ndarray | None = None):
        if n < 1 or n_s < 1 or n_b < 1:
            raise ValueError("n, n_s and n_b must be positive")
        if n_s % n_b:
            raise ValueError(f"n_b must divide n_s (n_s={n_s}, n_b={n_b})")
        self.n, self.n_s, self.n_b = int(n), int(n_s), int(n_b)
        if buffer is None:
            buffer = np.zeros(n * n_s, dtype=np.complex128)
        elif buffer.shape != (n * n_s,) or buffer.dtype != np.complex128:
            raise ValueError("buffer must be a flat complex128 array of length n*n_s")
        self._buffer = buffer
        panel = n * n_b
        self._panels = [
            buffer[b * panel:(b + 1) * panel].reshape(n, n_b) for b in range(self.n_panels)
        ]

    @property
    def n_panels(self) -> int:
        return self.n_s // self.n_b

    @property
    def shape(self) -> tuple[int, int]:
        return self.n, self.n_s

    def panel(self, b: int) -> np.ndarray:
        """The ``n x n_b`` array currently occupying panel slot ``b``."""
        return self._panels[b]

    def offset(self, i: int, j: int) -> int:
        self._check_index(i, j)
        return (j // self.n_b) * self.n * self.n_b + i * self.n_b + j % self.n_b

    def _check_index(self, i, j):
        if not (0 <= i < self.n and 0 <= j < self.n_s):
            raise IndexError(f"element ({i}, {j}) outside {self.n}x{self.n_s} block vector")

    def __getitem__(self, ij) -> complex:
        i, j = ij
        self._check_index(i, j)
        return complex(self._panels[j // self.n_b][i, j % self.n_b])

    def __setitem__(self, ij, value) -> None:
        i, j = ij
        self._check_index(i, j)
        self._panels[j // self.n_b][i, j % self.n_b] = value

    def to_flat(self) -> np.ndarray:
        """Linear storage image (panels in slot order)."""
        return np.concatenate([p.ravel() for p in self._panels])

    def to_dense(self) -> np.ndarray:
        return np.hstack(self._panels) if self._panels else np.zeros((self.n, 0), complex)

    def copy(self) -> "BlockVector":
        return BlockVector(self.n, self.n_s, self.n_b, self.to_flat())

    def reblock(self, n_b: int) -> "BlockVector":
        return BlockVector.from_dense(self.to_dense(), n_b)

    @classmethod
    def from_dense(cls, a, n_b: int) -> "BlockVector":
        a = np.asarray(a, dtype=np.complex128)
        if a.ndim == 1:
            a = a[:, None]
        n, n_s = a.shape
        if n_s % n_b:
            raise ValueError(f"n_b must divide n_s (n_s={n_s}, n_b={n_b})")
        flat = np.concatenate(
            [np.ascontiguousarray(a[:, b * n_b:(b + 1) * n_b]).ravel() for b in range(n_s // n_b)]
        )
        return cls(n, n_s, n_b, flat)

    def __repr__(self):
        return f"BlockVector(n={self.n}, n_s={self.n_s}, n_b={self.n_b})"


class SubblockView:
    """Handle on panel ``b`` of a block vector (columns ``b*n_b .. (b+1)*n_b``)."""

    __slots__ = ("parent", "b")

    def __init__(self, parent: BlockVector, b: int):
        if not 0 <= b < parent.n_panels:
            raise ValueError(f"panel index {b} outside [0, {parent.n_panels})")
        self.parent = parent
        self.b = b

    @property
    def array(self) -> np.ndarray:
        return self.parent._panels[self.b]

    @property
    def shape(self) -> tuple[int, int]:
        return self.parent.n, self.parent.n_b

    @property
    def columns(self) -> range:
        nb = self.parent.n_b
        return range(self.b * nb, (self.b + 1) * nb)

    def __getitem__(self, ij) -> complex:
        return complex(self.array[ij])

    def __setitem__(self, ij, value) -> None:
        self.array[ij] = value


def subblock_view(X: BlockVector, b: int) -> SubblockView:
    return SubblockView(X, b)


def swap_blocks(A: SubblockView, B: SubblockView) -> None:
    """Exchange the contents of two panels by swapping slot-table entries."""
    if A.shape != B.shape:
        raise ValueError(f"cannot swap panels of shape {A.shape} and {B.shape}")
    if A.parent is B.parent and A.b == B.b:
        return
    pa, pb = A.parent._panels, B.parent._panels
    pa[A.b], pb[B.b] = pb[B.b], pa[A.b]


def swap_vectors(U: BlockVector, W: BlockVector) -> None:
    """Swap every panel of U with the matching panel of W."""
    if U.shape != W.shape or U.n_b != W.n_b:
        raise ValueError("block vectors must have identical shape and blocking")
    U._panels, W._panels = W._panels, U._panels


def element_access(X: BlockVector, i: int, j: int, value=None):
    """Get ``X[i, j]`` or, when ``value`` is given, set it."""
    if value is None:
        return X[i, j]
    X[i, j] = value
    return None


# --------------------------------------------------------------------------
# Deterministic initialisation

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser; uint64 arithmetic wraps modulo 2**64
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def seeded_normal(seed: int, rows, cols) -> np.ndarray:
    """Complex unit-variance samples keyed only by ``(seed, row, col)``.

    ``rows`` and ``cols`` broadcast against each other; the value for a given
    global index never depends on the array shape or on how rows are split
    between workers.
    """
    with np.errstate(over="ignore"):
        r = np.asarray(rows, dtype=np.uint64)
        c = np.asarray(cols, dtype=np.uint64)
        key = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ np.uint64(0x243F6A8885A308D3))
        h = _mix64(_mix64(key ^ r) ^ c)
        h1 = _mix64(h ^ np.uint64(1))
        h2 = _mix64(h ^ np.uint64(2))
    u1 = ((h1 >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (h2 >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return np.sqrt(-np.log(u1)) * np.exp(2j * np.pi * u2)


def create_block_vector(
    n: int,
    n_s: int,
    n_b: int,
    init: str = "zero",
    *,
    value: complex = 0.0,
    seed: int = 0,
    row_offset: int = 0,
) -> BlockVector:
    """Allocate a block vector.

    ``init`` is ``"zero"``, ``"constant"`` (every entry ``value``) or
    ``"random"`` (counter-based complex normal keyed by ``seed``; rows are
    numbered from ``row_offset`` so row-distributed pieces match the serial
    vector).
    """
    X = BlockVector(n, n_s, n_b)
    if init == "zero":
        pass
    elif init == "constant":
        X._buffer[:] = value
    elif init == "random":
        rows = np.arange(row_offset, row_offset + n)[:, None]
        for b in range(X.n_panels):
            cols = np.arange(b * n_b, (b + 1) * n_b)[None, :]
            X.panel(b)[:] = seeded_normal(seed, rows, cols)
    else:
        raise ValueError(f"unknown init {init!r}")
    return X


# --------------------------------------------------------------------------
# Binary file format

_HEADER = struct.Struct("<4sIQQQB")


def save_block_vector(path, X: BlockVector) -> None:
    """Write the ``CFDB`` binary image: header, then panels row-major."""
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, X.n, X.n_s, X.n_b, LAYOUT_PANEL_ROW_MAJOR)
    data = X.to_flat().astype("<c16", copy=False)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def load_block_vector(path) -> BlockVector:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated block-vector file")
    magic, version, n, n_s, n_b, layout = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError("not a CFDB block-vector file")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported CFDB version {version}")
    if layout != LAYOUT_PANEL_ROW_MAJOR:
        raise ValueError(f"unsupported layout tag {layout}")
    payload = raw[_HEADER.size:]
    if len(payload) != 16 * n * n_s:
        raise ValueError("payload size does not match header")
    flat = np.frombuffer(payload, dtype="<c16").astype(np.complex128)
    return BlockVector(n, n_s, n_b, flat)
