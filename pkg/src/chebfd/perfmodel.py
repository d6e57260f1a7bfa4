"""Roofline model, traffic and flop accounting, and a STREAM-style bandwidth probe.

Byte counts follow the minimum-traffic convention: every matrix entry and
every block-vector element is moved once per sweep, write-allocate traffic
is not counted. GB means 1e9 bytes throughout.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np

__all__ = [
    "KernelGeometry",
    "RooflinePoint",
    "arithmetic_intensity",
    "intensity_limit",
    "roofline_limit",
    "min_traffic_volume",
    "flop_count",
    "slow_memory_amortization",
    "np_for_slowdown",
    "stream_bench",
    "STREAM_BYTES_PER_ELEMENT",
    "model_record",
]

GB = 1e9


@dataclass(frozen=True)
class KernelGeometry:
    """Per-row workload of the fused filter step.

    Defaults give the Topi accounting: 13 nonzeros per row, 16-byte complex
    values with 4-byte indices, 16-byte vector elements, 146 flops per row
    and vector.
    """

    n: int = 1
    n_nzr: float = 13.0
    entry_bytes: float = 20.0
    vec_elem_bytes: float = 16.0
    flops_per_row_per_vec: float = 146.0
    n_b: float = 1

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("n must be nonnegative")
        for name in ("n_nzr", "entry_bytes", "vec_elem_bytes", "flops_per_row_per_vec", "n_b"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def matrix_bytes_per_row(self) -> float:
        return self.n_nzr * self.entry_bytes


@dataclass(frozen=True)
class RooflinePoint:
    p_max: float
    bandwidth: float
    intensity: float
    p_star: float

    @property
    def memory_bound(self) -> bool:
        return self.intensity * self.bandwidth < self.p_max


def arithmetic_intensity(g: KernelGeometry) -> float:
    """Flops per byte of minimum traffic for one row and one vector.

    Matrix traffic is shared by ``n_b`` vectors; each vector moves five
    elements per row (U, W, X read; W, X written).
    """
    return g.flops_per_row_per_vec / (g.matrix_bytes_per_row / g.n_b + 5 * g.vec_elem_bytes)


def intensity_limit(g: KernelGeometry = KernelGeometry()) -> float:
    """``n_b -> infinity`` bound of :func:`arithmetic_intensity`."""
    return g.flops_per_row_per_vec / (5 * g.vec_elem_bytes)


def roofline_limit(p_max: float, bandwidth: float, intensity: float) -> RooflinePoint:
    return RooflinePoint(p_max, bandwidth, intensity, min(p_max, intensity * bandwidth))


def min_traffic_volume(g: KernelGeometry) -> tuple[float, float]:
    """Minimum (read, write) bytes of one filter sweep over ``n`` rows and ``n_b`` vectors."""
    vec = g.n * g.n_b * g.vec_elem_bytes
    return g.n * g.matrix_bytes_per_row + 3 * vec, 2 * vec


def flop_count(g: KernelGeometry, iterations: int = 1) -> float:
    return g.flops_per_row_per_vec * g.n * g.n_b * iterations


def slow_memory_amortization(working_set_bytes: float, fast_bw: float, slow_bw: float,
                             n_p: int, t_iter_fast: float) -> float:
    """Predicted slowdown when a panel's working set streams in from slow memory.

    The panel is fetched once (``working_set_bytes / slow_bw``) and then
    reused for ``n_p`` iterations of ``t_iter_fast`` seconds each.
    ``fast_bw`` only enters through ``t_iter_fast``; it is accepted so
    callers can record the full configuration.
    """
    for name, v in (("working_set_bytes", working_set_bytes), ("fast_bw", fast_bw),
                    ("slow_bw", slow_bw), ("n_p", n_p), ("t_iter_fast", t_iter_fast)):
        if not v > 0:
            raise ValueError(f"{name} must be positive")
    if math.isinf(slow_bw):
        return 1.0
    return 1.0 + (working_set_bytes / slow_bw) / (n_p * t_iter_fast)


def np_for_slowdown(working_set_bytes: float, slow_bw: float, t_iter_fast: float,
                    max_slowdown: float = 1.1) -> float:
    """Smallest degree keeping the predicted slowdown at or below ``max_slowdown``."""
    return (working_set_bytes / slow_bw) / ((max_slowdown - 1.0) * t_iter_fast)


def model_record(g: KernelGeometry, p_max: float | None = None, bandwidth: float | None = None,
                 iterations: int = 1) -> dict:
    """JSON-ready calculator output: inputs, intensity, traffic and (optionally) P*."""
    read, write = min_traffic_volume(g)
    rec = asdict(g)
    rec.update(
        intensity=arithmetic_intensity(g),
        intensity_limit=intensity_limit(g),
        read_bytes=read,
        write_bytes=write,
        flops=flop_count(g, iterations),
        iterations=iterations,
    )
    if p_max is not None and bandwidth is not None:
        pt = roofline_limit(p_max, bandwidth, rec["intensity"])
        rec.update(p_max=p_max, bandwidth=bandwidth, p_star=pt.p_star)
    return rec


# --------------------------------------------------------------------------
# STREAM-style bandwidth measurement

STREAM_BYTES_PER_ELEMENT = {"copy": 16, "scale": 16, "add": 24, "triad": 24}


def stream_bench(array_elems: int = 10_000_000, kind: str = "triad", repetitions: int = 10) -> float:
    """Best-of-``repetitions`` bandwidth in bytes/s for one STREAM kernel on float64 arrays."""
    if kind not in STREAM_BYTES_PER_ELEMENT:
        raise ValueError(f"unknown STREAM kernel {kind!r}")
    if array_elems < 1 or repetitions < 1:
        raise ValueError("array_elems and repetitions must be positive")
    a = np.full(array_elems, 1.0)
    b = np.full(array_elems, 2.0)
    c = np.zeros(array_elems)
    q = 3.0
    ops = {
        "copy": lambda: np.copyto(c, a),
        "scale": lambda: np.multiply(c, q, out=b),
        "add": lambda: np.add(a, b, out=c),
        "triad": lambda: np.add(b, q * c, out=a),
    }
    op = ops[kind]
    op()
    best = math.inf
    for _ in range(repetitions):
        t0 = time.perf_counter()
        op()
        best = min(best, time.perf_counter() - t0)
    return STREAM_BYTES_PER_ELEMENT[kind] * array_elems / best
