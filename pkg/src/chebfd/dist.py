"""Row-distributed filter application with halo exchange.

Workers are simulated in one process and advanced in lockstep: every step of
the schedule (swap, exchange init, exchange finalize, compute) is issued for
all workers before the next step starts. Messages go through a transport;
the default :class:`InProcessTransport` uses queues, :class:`SocketTransport`
sends length-prefixed frames over local socket pairs from background
threads.

A simulated clock runs alongside the real computation and produces the
:class:`Timeline`. Exchange init is nonblocking: the transfer completes
``comm_cost`` after it was posted, and finalize waits for that.
"""
from __future__ import annotations

import socket
import struct
import threading
from collections import defaultdict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .blockvec import BlockVector, SubblockView, subblock_view, swap_blocks, swap_vectors
from .chebkernel import MomentSeries, TrafficCounter, chebfd_op, spmmv_shifted, tree_sum
from .matrix import PartitionPlan, SparseMatrixCRS

__all__ = [
    "LocalMatrix",
    "WorkerShard",
    "Timeline",
    "TimelineEvent",
    "ProtocolError",
    "DistributedRunError",
    "InProcessTransport",
    "SocketTransport",
    "encode_tag",
    "decode_tag",
    "encode_frame",
    "decode_frame",
    "shard_and_distribute",
    "gather_rows",
    "halo_exchange",
    "schedule",
    "filter_distributed",
    "simulate_timeline",
    "timeline_formula",
]


class ProtocolError(RuntimeError):
    """Halo exchange calls out of order."""


class DistributedRunError(RuntimeError):
    """A worker failed; the run is aborted without partial results."""


# --------------------------------------------------------------------------
# wire format

_FRAME = struct.Struct("<IQ")
_DEGREE_BITS, _BLOCK_BITS, _NEIGHBOR_BITS = 14, 8, 10


def encode_tag(degree: int, block: int, neighbor: int) -> int:
    """Pack ``(degree, block, neighbor)`` into a u32 (14/8/10 bits)."""
    if not (0 <= degree < 1 << _DEGREE_BITS and 0 <= block < 1 << _BLOCK_BITS
            and 0 <= neighbor < 1 << _NEIGHBOR_BITS):
        raise ValueError(f"tag fields out of range: {(degree, block, neighbor)}")
    return (degree << (_BLOCK_BITS + _NEIGHBOR_BITS)) | (block << _NEIGHBOR_BITS) | neighbor


def decode_tag(tag: int) -> tuple[int, int, int]:
    return (tag >> (_BLOCK_BITS + _NEIGHBOR_BITS),
            (tag >> _NEIGHBOR_BITS) & ((1 << _BLOCK_BITS) - 1),
            tag & ((1 << _NEIGHBOR_BITS) - 1))


def encode_frame(tag: int, payload: np.ndarray) -> bytes:
    data = np.ascontiguousarray(payload, dtype="<c16").tobytes()
    return _FRAME.pack(tag, len(data)) + data


def decode_frame(buf: bytes) -> tuple[int, np.ndarray, bytes]:
    """Split one frame off ``buf``; returns ``(tag, payload, rest)``."""
    if len(buf) < _FRAME.size:
        raise ValueError("incomplete frame header")
    tag, size = _FRAME.unpack_from(buf)
    end = _FRAME.size + size
    if len(buf) < end or size % 16:
        raise ValueError("incomplete or misaligned frame payload")
    payload = np.frombuffer(buf[_FRAME.size:end], dtype="<c16").astype(np.complex128)
    return tag, payload, buf[end:]


# --------------------------------------------------------------------------
# transports

class InProcessTransport:
    """FIFO queues per ordered worker pair."""

    def __init__(self):
        self._queues: dict[tuple[int, int], deque] = defaultdict(deque)

    def post(self, src: int, dst: int, tag: int, payload: np.ndarray) -> None:
        self._queues[src, dst].append((tag, np.array(payload, copy=True)))

    def take(self, src: int, dst: int, tag: int) -> np.ndarray:
        q = self._queues[src, dst]
        if not q:
            raise ProtocolError(f"no message from worker {src} to {dst}")
        got, payload = q.popleft()
        if got != tag:
            raise ProtocolError(f"expected tag {decode_tag(tag)}, got {decode_tag(got)}")
        return payload

    def close(self) -> None:
        self._queues.clear()


class SocketTransport:
    """Frames over ``socket.socketpair`` links, sent from per-link threads."""

    def __init__(self):
        self._links: dict[tuple[int, int], tuple[socket.socket, socket.socket]] = {}
        self._senders: dict[tuple[int, int], ThreadPoolExecutor] = {}
        self._lock = threading.Lock()

    def _link(self, src, dst):
        with self._lock:
            if (src, dst) not in self._links:
                self._links[src, dst] = socket.socketpair()
                self._senders[src, dst] = ThreadPoolExecutor(max_workers=1)
            return self._links[src, dst], self._senders[src, dst]

    def post(self, src: int, dst: int, tag: int, payload: np.ndarray) -> None:
        (tx, _), sender = self._link(src, dst)
        sender.submit(tx.sendall, encode_frame(tag, payload))

    def _recv_exact(self, sock, size):
        chunks, remaining = [], size
        while remaining:
            chunk = sock.recv(remaining)
            if not chunk:
                raise ProtocolError("link closed mid-frame")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def take(self, src: int, dst: int, tag: int) -> np.ndarray:
        (_, rx), _ = self._link(src, dst)
        header = self._recv_exact(rx, _FRAME.size)
        got, size = _FRAME.unpack(header)
        body = self._recv_exact(rx, size)
        if got != tag:
            raise ProtocolError(f"expected tag {decode_tag(tag)}, got {decode_tag(got)}")
        return decode_frame(header + body)[1]

    def close(self) -> None:
        for ex in self._senders.values():
            ex.shutdown(wait=True)
        for a, b in self._links.values():
            a.close()
            b.close()
        self._links.clear()
        self._senders.clear()


# --------------------------------------------------------------------------
# sharding

@dataclass(frozen=True, eq=False)
class LocalMatrix:
    """Owned rows of H with columns renumbered: owned rows first, then halo slots."""

    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    ncols: int

    @property
    def nrows(self) -> int:
        return self.row_ptr.size - 1


@dataclass(eq=False)
class WorkerShard:
    rank: int
    row_range: tuple[int, int]
    matrix: LocalMatrix
    halo_rows: np.ndarray
    send_rows: dict[int, np.ndarray]
    recv_slots: dict[int, slice]
    X: BlockVector
    transport: object = None
    U: BlockVector | None = None
    W: BlockVector | None = None
    _pending: dict = field(default_factory=dict)

    @property
    def n_local(self) -> int:
        return self.row_range[1] - self.row_range[0]

    @property
    def n_halo(self) -> int:
        return self.halo_rows.size


def shard_and_distribute(H: SparseMatrixCRS, X: BlockVector, plan: PartitionPlan,
                         transport=None) -> list[WorkerShard]:
    """Split H and X into per-worker shards following ``plan``."""
    if plan.n != H.n or X.n != H.n:
        raise ValueError("partition plan, matrix and block vector sizes disagree")
    transport = InProcessTransport() if transport is None else transport
    shards = []
    for w, (lo, hi) in enumerate(plan.row_ranges):
        halo = plan.halo_rows(w)
        n_local = hi - lo
        rp = H.row_ptr[lo:hi + 1] - H.row_ptr[lo]
        cols = H.col_idx[H.row_ptr[lo]:H.row_ptr[hi]].astype(np.int64)
        local = np.empty_like(cols)
        own = (cols >= lo) & (cols < hi)
        local[own] = cols[own] - lo
        if halo.size:
            order = np.argsort(halo)
            pos = np.searchsorted(halo[order], cols[~own])
            if np.any(halo[order][np.minimum(pos, halo.size - 1)] != cols[~own]):
                raise ValueError(f"plan halo of worker {w} misses referenced columns")
            local[~own] = n_local + order[pos]
        elif not np.all(own):
            raise ValueError(f"plan halo of worker {w} misses referenced columns")
        mat = LocalMatrix(rp, local.astype(np.int32), H.values[H.row_ptr[lo]:H.row_ptr[hi]].copy(),
                          n_local + halo.size)

        recv_slots, start = {}, n_local
        for v in sorted(plan.halo_in[w]):
            size = plan.halo_in[w][v].size
            recv_slots[v] = slice(start, start + size)
            start += size
        send_rows = {v: rows - lo for v, rows in sorted(plan.halo_out[w].items())}

        Xw = BlockVector(n_local + halo.size, X.n_s, X.n_b)
        for b in range(X.n_panels):
            Xw.panel(b)[:n_local] = X.panel(b)[lo:hi]
        shards.append(WorkerShard(w, (lo, hi), mat, halo, send_rows, recv_slots, Xw, transport))
    return shards


def gather_rows(shards: list[WorkerShard], which: str = "X") -> BlockVector:
    """Reassemble the owned rows of a per-worker block vector."""
    first = getattr(shards[0], which)
    n = sum(s.n_local for s in shards)
    out = BlockVector(n, first.n_s, first.n_b)
    for s in shards:
        lo, hi = s.row_range
        vec = getattr(s, which)
        for b in range(out.n_panels):
            out.panel(b)[lo:hi] = vec.panel(b)[:s.n_local]
    return out


# --------------------------------------------------------------------------
# halo exchange

def _panel_key(view: SubblockView):
    return id(view.parent), view.b


def halo_exchange(shard: WorkerShard, view: SubblockView, phase: str, degree: int = 0) -> None:
    """Nonblocking halo exchange of one panel in two phases.

    ``init`` posts this worker's boundary rows to every neighbour and returns;
    ``finalize`` receives the neighbours' rows into the halo slots. Halo slots
    must not be read between the two calls.
    """
    key = _panel_key(view)
    if phase == "init":
        if key in shard._pending:
            raise ProtocolError(f"worker {shard.rank}: exchange already outstanding on panel {view.b}")
        panel = view.array
        for v, rows in shard.send_rows.items():
            shard.transport.post(shard.rank, v, encode_tag(degree, view.b, shard.rank), panel[rows])
        shard._pending[key] = degree
    elif phase == "finalize":
        if key not in shard._pending:
            raise ProtocolError(f"worker {shard.rank}: finalize without init on panel {view.b}")
        posted = shard._pending.pop(key)
        if posted != degree:
            raise ProtocolError(f"worker {shard.rank}: finalize degree {degree} != init degree {posted}")
        panel = view.array
        for v, slots in shard.recv_slots.items():
            data = shard.transport.take(v, shard.rank, encode_tag(degree, view.b, v))
            panel[slots] = data.reshape(-1, panel.shape[1])
    else:
        raise ValueError(f"unknown phase {phase!r}")


# --------------------------------------------------------------------------
# schedules and timeline

@dataclass(frozen=True)
class TimelineEvent:
    kind: str  # compute | comm_init | comm_wait
    block: int
    degree: int
    start: float
    end: float


@dataclass
class Timeline:
    events: list[list[TimelineEvent]]

    @property
    def total(self) -> float:
        return max((ev[-1].end for ev in self.events if ev), default=0.0)

    def shape(self, worker: int = 0) -> list[tuple[str, int]]:
        return [(e.kind, e.block) for e in self.events[worker]]


def schedule(n_blocks: int, degrees, mode: str) -> Iterator[tuple[str, int, int]]:
    """Ordered ``(op, block, degree)`` steps; ``op`` in swap|init|finalize|compute.

    ``vector``: blocks outer, degrees inner, blocking exchange before every
    compute. ``pipelined``: degrees outer; block 0 is exchanged eagerly, then
    the exchange of block ``b+1`` is in flight while block ``b`` computes.
    With one block the pipelined schedule equals the vector schedule.
    """
    degrees = list(degrees)
    if mode == "pipelined" and n_blocks == 1:
        mode = "vector"
    if mode == "vector":
        for b in range(n_blocks):
            for p in degrees:
                yield "swap", b, p
                yield "init", b, p
                yield "finalize", b, p
                yield "compute", b, p
    elif mode == "pipelined":
        for p in degrees:
            yield "swap", -1, p
            yield "init", 0, p
            yield "finalize", 0, p
            for b in range(n_blocks - 1):
                yield "init", b + 1, p
                yield "compute", b, p
                yield "finalize", b + 1, p
            yield "compute", n_blocks - 1, p
    else:
        raise ValueError(f"unknown mode {mode!r}")


class _Clock:
    """Per-worker simulated time; transfers complete ``comm`` after init."""

    def __init__(self, workers: int, comm: float, compute: float):
        self.now = [0.0] * workers
        self.comm, self.compute = comm, compute
        self.arrival: dict[tuple[int, int], float] = {}
        self.events: list[list[TimelineEvent]] = [[] for _ in range(workers)]

    def step(self, op, b, p, senders=None):
        # senders[w]: ranks whose message worker w waits for on finalize
        for w in range(len(self.now)):
            t = self.now[w]
            if op == "init":
                self.arrival[w, b] = t + self.comm
                self.events[w].append(TimelineEvent("comm_init", b, p, t, t + self.comm))
            elif op == "finalize":
                src = [w] if senders is None else (senders[w] or [w])
                ready = max(self.arrival[v, b] for v in src)
                end = max(t, ready)
                self.events[w].append(TimelineEvent("comm_wait", b, p, t, end))
                self.now[w] = end
            elif op == "compute":
                self.events[w].append(TimelineEvent("compute", b, p, t, t + self.compute))
                self.now[w] = t + self.compute
        if op == "finalize":
            for w in range(len(self.now)):
                del self.arrival[w, b]

    def timeline(self) -> Timeline:
        return Timeline(self.events)


def timeline_formula(B: int, D: int, c: float, k: float, mode: str) -> float:
    """Closed-form makespan of the vector and pipelined schedules."""
    if mode == "vector" or B == 1:
        return B * D * (c + k)
    if mode == "pipelined":
        return D * (c + B * k) if c <= k else D * (c + k + (B - 1) * c)
    raise ValueError(f"unknown mode {mode!r}")


def simulate_timeline(B: int, D: int, c: float, k: float, mode: str,
                      return_timeline: bool = False):
    """Discrete-event makespan of ``D`` degrees over ``B`` blocks.

    ``c`` is the cost of one halo transfer, ``k`` of one block compute.
    """
    if B < 1 or D < 0 or c < 0 or k < 0:
        raise ValueError("need B >= 1, D >= 0 and nonnegative costs")
    clock = _Clock(1, c, k)
    for op, b, p in schedule(B, range(D), mode):
        if op != "swap":
            clock.step(op, b, p)
    tl = clock.timeline()
    return (tl.total, tl) if return_timeline else tl.total


# --------------------------------------------------------------------------
# distributed filter

def _blocking_exchange(shards, views, degree):
    for s, v in zip(shards, views):
        halo_exchange(s, v, "init", degree)
    for s, v in zip(shards, views):
        halo_exchange(s, v, "finalize", degree)


def filter_distributed(shards: list[WorkerShard], coeffs, n_b: int | None = None, mode: str = "vector",
                       *, comm_cost: float = 1.0, compute_cost: float = 2.0,
                       counters: list[TrafficCounter] | None = None):
    """Apply the window filter to the sharded block vectors.

    Returns ``(X, moments, timeline)`` where ``X`` is the reassembled
    filtered block vector and ``moments`` are reduced over workers in rank
    order. The timeline covers the degree loop (degrees 3..n_p).
    """
    if not shards:
        raise ValueError("no shards")
    X0 = shards[0].X
    n_b = X0.n_b if n_b is None else n_b
    if X0.n_s % n_b:
        raise ValueError(f"n_b must divide n_s (n_s={X0.n_s}, n_b={n_b})")
    if mode not in ("vector", "pipelined"):
        raise ValueError(f"unknown mode {mode!r}")
    s = coeffs.map
    gc = coeffs.gc
    n_p = coeffs.n_p
    nw = len(shards)
    counters = counters if counters is not None else [None] * nw

    for sh in shards:
        if sh.X.n_b != n_b:
            sh.X = sh.X.reblock(n_b)
        sh.U = BlockVector(sh.X.n, sh.X.n_s, n_b)
        sh.W = BlockVector(sh.X.n, sh.X.n_s, n_b)
        sh._pending.clear()
    n_blocks = X0.n_s // n_b
    local_moments = [MomentSeries(n_p, X0.n_s) for _ in range(nw)]
    senders = [list(sh.recv_slots) for sh in shards]
    clock = _Clock(nw, comm_cost, compute_cost)

    def init_block(b):
        xs = [subblock_view(sh.X, b) for sh in shards]
        us = [subblock_view(sh.U, b) for sh in shards]
        ws = [subblock_view(sh.W, b) for sh in shards]
        _blocking_exchange(shards, xs, 0)
        for sh, x, u, cnt in zip(shards, xs, us, counters):
            spmmv_shifted(sh.matrix, s, x, u, counter=cnt)
        _blocking_exchange(shards, us, 1)
        for sh, x, u, w, cnt in zip(shards, xs, us, ws, counters):
            spmmv_shifted(sh.matrix, s, u, w, accumulate=x, counter=cnt)
            n = sh.n_local
            xa, ua, wa = x.array, u.array, w.array
            xa[:n] = gc[0] * xa[:n] + gc[1] * ua[:n] + gc[2] * wa[:n]
            if cnt is not None:
                for arr in (xa, ua, wa):
                    cnt.read(arr)
                cnt.write(xa)

    try:
        if mode == "pipelined":
            for b in range(n_blocks):
                init_block(b)
        for op, b, p in schedule(n_blocks, range(3, n_p + 1), mode):
            if mode == "vector" and op == "swap" and p == 3:
                init_block(b)
            if op == "swap":
                for sh in shards:
                    if b < 0:
                        swap_vectors(sh.W, sh.U)
                    else:
                        swap_blocks(subblock_view(sh.W, b), subblock_view(sh.U, b))
                continue
            if op in ("init", "finalize"):
                for sh in shards:
                    halo_exchange(sh, subblock_view(sh.U, b), op, p)
            else:
                for sh, mom, cnt in zip(shards, local_moments, counters):
                    chebfd_op(sh.matrix, s, subblock_view(sh.U, b), subblock_view(sh.W, b),
                              subblock_view(sh.X, b), p, gc[p], out=mom, counter=cnt)
            clock.step(op, b, p, senders)
        if mode == "vector" and n_p < 3:
            for b in range(n_blocks):
                init_block(b)
    except Exception as exc:
        for sh in shards:
            sh._pending.clear()
        raise DistributedRunError(f"distributed filter aborted: {exc}") from exc

    moments = MomentSeries(
        n_p, X0.n_s,
        tree_sum(np.stack([m.eta for m in local_moments])),
        tree_sum(np.stack([m.mu for m in local_moments])),
    )
    return gather_rows(shards, "X"), moments, clock.timeline()
