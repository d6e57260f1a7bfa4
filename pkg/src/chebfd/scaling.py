"""Weak-scaling problem construction and modelled per-degree costs.

Each worker owns a ``128 x 64 x 64`` lattice subdomain. For a scale factor
``nscal`` there are ``2 * nscal**2`` workers on a ``nscal x 2*nscal x 1``
process grid, i.e. the global lattice Topi-(128 nscal)-(128 nscal)-64.
"""
from __future__ import annotations

from dataclasses import dataclass

from .dist import simulate_timeline
from .perfmodel import KernelGeometry, arithmetic_intensity, min_traffic_volume, roofline_limit

SUBDOMAIN = (128, 64, 64)


@dataclass(frozen=True)
class ScalingPlan:
    nscal: int
    workers: int
    grid: tuple[int, int, int]
    lattice: tuple[int, int, int]
    n: int
    rows_per_worker: int
    halo_rows_per_worker: int

    def as_dict(self) -> dict:
        return {
            "nscal": self.nscal,
            "workers": self.workers,
            "grid": list(self.grid),
            "lattice": list(self.lattice),
            "n": self.n,
            "rows_per_worker": self.rows_per_worker,
            "halo_rows_per_worker": self.halo_rows_per_worker,
        }


def weak_scaling_plan(nscal: int, subdomain=SUBDOMAIN) -> ScalingPlan:
    if nscal < 1:
        raise ValueError("nscal must be positive")
    grid = (nscal, 2 * nscal, 1)
    lattice = tuple(g * s for g, s in zip(grid, subdomain))
    sx, sy, sz = subdomain
    faces = (sy * sz, sx * sz, sx * sy)
    # periodic lattice: a split direction contributes one face from each side
    halo_sites = sum(2 * f for g, f in zip(grid, faces) if g > 1)
    n = 4 * lattice[0] * lattice[1] * lattice[2]
    return ScalingPlan(
        nscal=nscal,
        workers=grid[0] * grid[1] * grid[2],
        grid=grid,
        lattice=lattice,
        n=n,
        rows_per_worker=4 * sx * sy * sz,
        halo_rows_per_worker=4 * halo_sites,
    )


def modelled_costs(plan: ScalingPlan, n_s: int, n_b: int, n_p: int, mem_bw: float, p_max: float,
                   net_bw: float, latency: float) -> dict:
    """Per-worker block compute and halo transfer times plus simulated makespans."""
    geom = KernelGeometry(n=plan.rows_per_worker, n_b=n_b)
    intensity = arithmetic_intensity(geom)
    p_star = roofline_limit(p_max, mem_bw, intensity).p_star
    flops = geom.flops_per_row_per_vec * plan.rows_per_worker * n_b
    compute = flops / p_star
    halo_bytes = plan.halo_rows_per_worker * n_b * geom.vec_elem_bytes
    comm = latency + halo_bytes / net_bw if plan.halo_rows_per_worker else 0.0
    blocks, degrees = n_s // n_b, max(n_p - 2, 0)
    read, write = min_traffic_volume(geom)
    return {
        "intensity": intensity,
        "p_star_worker": p_star,
        "p_star_total": p_star * plan.workers,
        "block_compute_seconds": compute,
        "halo_bytes": halo_bytes,
        "block_comm_seconds": comm,
        "read_bytes_per_block": read,
        "write_bytes_per_block": write,
        "vector_seconds": simulate_timeline(blocks, degrees, comm, compute, "vector"),
        "pipelined_seconds": simulate_timeline(blocks, degrees, comm, compute, "pipelined"),
    }
