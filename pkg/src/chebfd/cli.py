"""Command-line front end.

Every run writes its effective configuration to stderr as ``key=value``
lines; that text can be fed back with ``--config`` to repeat the run.
Exit codes: 0 success, 1 user error, 2 internal error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

REPORT_COLUMNS = [
    "run_id", "n", "n_s", "n_b", "n_p", "workers", "mode",
    "wall_seconds", "flops", "flop_rate", "model_p_star",
]

COMMANDS = ("generate", "solve", "bench-kernel", "bench-stream", "model", "scale-sim")


class UsageError(Exception):
    """Invalid command line or configuration."""


@dataclass
class RunConfig:
    command: str = ""
    nx: int = 4
    ny: int = 4
    nz: int = 4
    mass: float = 1.0
    hop: float = 1.0
    boundary: str = "periodic"
    disorder: float = 0.0
    matrix: str = ""
    ns: int = 16
    nb: int = 4
    np: int = 500
    window: tuple = (-0.2, 0.2)
    mode: str = "vector"
    workers: int = 1
    seed: int = 0
    tol: float = 1e-9
    restarts: int = 30
    damping: str = "jackson"
    emit: str = "json"
    out: str = ""
    n: int = 2_097_152
    bandwidth: float = 0.0
    pmax: float = 0.0
    nscal: int = 16
    elems: int = 10_000_000
    reps: int = 10
    execute: bool = False

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        for name in ("nx", "ny", "nz", "ns", "nb", "workers", "nscal", "elems", "reps", "restarts"):
            if getattr(self, name) < 1:
                raise UsageError(f"--{name} must be a positive integer")
        if self.np < 2:
            raise UsageError("--np must be at least 2")
        if self.command in ("solve", "bench-kernel") and self.ns % self.nb:
            raise UsageError(f"n_b must divide n_s (n_s={self.ns}, n_b={self.nb})")
        if self.boundary not in ("periodic", "open"):
            raise UsageError("--boundary must be periodic or open")
        if self.mode not in ("vector", "pipelined"):
            raise UsageError("--mode must be vector or pipelined")
        if self.damping not in ("jackson", "none"):
            raise UsageError("--damping must be jackson or none")
        if self.emit not in ("json", "csv"):
            raise UsageError("--emit must be json or csv")
        lo, hi = self.window
        if not lo < hi:
            raise UsageError("--window needs LO < HI")
        if self.tol <= 0:
            raise UsageError("--tol must be positive")
        if self.bandwidth < 0 or self.pmax < 0:
            raise UsageError("--bandwidth and --pmax must be nonnegative")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = " ".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse_text(cls, text: str) -> dict:
        types = {f.name: type(f.default) for f in fields(cls)}
        out = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in types:
                raise UsageError(f"config line {lineno}: unknown entry {raw!r}")
            try:
                t = types[key]
                if t is tuple:
                    out[key] = tuple(float(x) for x in value.split())
                elif t is bool:
                    out[key] = value.lower() in ("1", "true", "yes")
                else:
                    out[key] = t(value)
            except ValueError:
                raise UsageError(f"config line {lineno}: bad value for {key}") from None
        return out


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    a = common.add_argument
    a("--config", help="key=value file; flags override its entries")
    a("--nx", type=int)
    a("--ny", type=int)
    a("--nz", type=int)
    a("--mass", type=float)
    a("--hop", type=float)
    a("--boundary", choices=["periodic", "open"])
    a("--disorder", type=float, help="onsite disorder amplitude")
    a("--matrix", help="Matrix Market file to use instead of the lattice")
    a("--ns", type=int, help="search-space size n_s")
    a("--nb", type=int, help="subblock width n_b")
    a("--np", type=int, help="polynomial degree n_p")
    a("--window", type=float, nargs=2, metavar=("LO", "HI"))
    a("--mode", choices=["vector", "pipelined"])
    a("--workers", type=int)
    a("--seed", type=int)
    a("--tol", type=float)
    a("--restarts", type=int)
    a("--damping", choices=["jackson", "none"])
    a("--emit", choices=["json", "csv"])
    a("--out", help="output path (default stdout)")
    a("--n", type=int, help="row count for model calculations")
    a("--bandwidth", type=float, help="memory bandwidth in GB/s")
    a("--pmax", type=float, help="peak compute in GF/s")
    a("--nscal", type=int, help="weak-scaling factor")
    a("--elems", type=int, help="STREAM array length")
    a("--reps", type=int, help="STREAM repetitions")
    a("--execute", action="store_true", default=None,
      help="scale-sim: also run a toy-size distributed filter")
    a("-v", "--verbose", action="store_true", default=None)

    parser = _Parser(prog="chebfd", description="Chebyshev filter diagonalization toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "generate": "build a Topi matrix and write it as Matrix Market",
        "solve": "compute interior eigenpairs in a window",
        "bench-kernel": "time the blocked filter and compare with the Roofline bound",
        "bench-stream": "measure STREAM-style memory bandwidth",
        "model": "evaluate intensity, Roofline bound and minimum traffic",
        "scale-sim": "emit the weak-scaling plan with modelled costs",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def resolve_config(argv) -> tuple[RunConfig, bool]:
    args = build_parser().parse_args(argv)
    values = {}
    if args.config:
        try:
            values.update(RunConfig.parse_text(Path(args.config).read_text()))
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = tuple(v) if f.name == "window" else v
    values["command"] = args.command
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg, bool(args.verbose)


# --------------------------------------------------------------------------
# reporting

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def emit_report(results: list[dict], format: str = "csv", path: str | None = None) -> str:
    """Write run records as CSV (fixed columns) or JSON; returns the text."""
    rows = [{k: r.get(k) for k in REPORT_COLUMNS} for r in results]
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in REPORT_COLUMNS])
        text = buf.getvalue()
    elif format == "json":
        text = json.dumps(rows, indent=2, default=_json_default) + "\n"
    else:
        raise ValueError(f"unknown format {format!r}")
    _write(text, path)
    return text


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _write(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _emit_json(obj, cfg: RunConfig) -> None:
    _write(json.dumps(obj, indent=2, default=_json_default) + "\n", cfg.out or None)


# --------------------------------------------------------------------------
# commands

def _matrix(cfg: RunConfig):
    from .matrix import LatticeSpec, read_matrix_market, topi_generate

    if cfg.matrix:
        return read_matrix_market(cfg.matrix)
    spec = LatticeSpec(cfg.nx, cfg.ny, cfg.nz, cfg.mass, cfg.hop, cfg.boundary, cfg.seed, cfg.disorder)
    return topi_generate(spec)


def cmd_generate(cfg: RunConfig) -> None:
    from .matrix import gershgorin_bounds, write_matrix_market

    H = _matrix(cfg)
    lo, hi = gershgorin_bounds(H)
    summary = {"n": H.n, "nnz": H.nnz, "nnz_per_row": H.nnz / H.n, "gershgorin": [lo, hi]}
    if cfg.out:
        write_matrix_market(cfg.out, H)
        summary["path"] = cfg.out
    sys.stdout.write(json.dumps(summary) + "\n")


def cmd_solve(cfg: RunConfig) -> None:
    from .filter import chebfd_solve

    H = _matrix(cfg)
    t0 = time.perf_counter()
    res = chebfd_solve(H, cfg.window, cfg.ns, cfg.nb, cfg.np, cfg.restarts, cfg.tol,
                       seed=cfg.seed, damping=cfg.damping)
    wall = time.perf_counter() - t0
    if cfg.emit == "json":
        _emit_json({
            "n": H.n, "window": list(cfg.window), "iterations": res.iterations,
            "converged": res.converged, "wall_seconds": wall,
            "eigenvalues": res.eigenvalues, "residuals": res.residuals,
        }, cfg)
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "eigenvalue", "residual"])
        for i, (lam, r) in enumerate(zip(res.eigenvalues, res.residuals)):
            w.writerow([i, _fmt(lam), _fmt(r)])
        _write(buf.getvalue(), cfg.out or None)


def cmd_bench_kernel(cfg: RunConfig) -> None:
    from .blockvec import create_block_vector
    from .dist import filter_distributed, shard_and_distribute
    from .filter import apply_filter, filter_coefficients, spectral_map
    from .matrix import gershgorin_bounds, partition_rows
    from .perfmodel import KernelGeometry, arithmetic_intensity, flop_count, roofline_limit, stream_bench

    H = _matrix(cfg)
    lo, hi = gershgorin_bounds(H)
    coeffs = filter_coefficients(cfg.window, spectral_map(lo, hi, 0.01), cfg.np, cfg.damping)
    X = create_block_vector(H.n, cfg.ns, cfg.nb, "random", seed=cfg.seed)
    # warm-up compiles the kernels outside the timed region
    apply_filter(H, X.copy(), filter_coefficients(cfg.window, coeffs.map, 3, cfg.damping), cfg.nb)
    t0 = time.perf_counter()
    if cfg.workers == 1:
        apply_filter(H, X, coeffs, cfg.nb)
    else:
        shards = shard_and_distribute(H, X, partition_rows(H, cfg.workers))
        filter_distributed(shards, coeffs, cfg.nb, cfg.mode)
    wall = time.perf_counter() - t0
    geom = KernelGeometry(n=H.n, n_nzr=H.nnz / H.n, n_b=cfg.nb)
    flops = flop_count(geom, cfg.np - 2) * (cfg.ns // cfg.nb)
    bw = cfg.bandwidth * 1e9 if cfg.bandwidth else stream_bench(2_000_000, "triad", 5)
    pmax = cfg.pmax * 1e9 if cfg.pmax else float("inf")
    record = {
        "run_id": f"bench-kernel-{cfg.seed}", "n": H.n, "n_s": cfg.ns, "n_b": cfg.nb, "n_p": cfg.np,
        "workers": cfg.workers, "mode": cfg.mode, "wall_seconds": wall, "flops": flops,
        "flop_rate": flops / wall, "model_p_star": roofline_limit(pmax, bw, arithmetic_intensity(geom)).p_star,
    }
    emit_report([record], cfg.emit, cfg.out or None)


def cmd_bench_stream(cfg: RunConfig) -> None:
    from .perfmodel import STREAM_BYTES_PER_ELEMENT, stream_bench

    out = {"elements": cfg.elems, "repetitions": cfg.reps, "unit": "GB/s"}
    for kind in STREAM_BYTES_PER_ELEMENT:
        out[kind] = stream_bench(cfg.elems, kind, cfg.reps) / 1e9
    _emit_json(out, cfg)


def cmd_model(cfg: RunConfig) -> None:
    from .perfmodel import KernelGeometry, model_record

    g = KernelGeometry(n=cfg.n, n_b=cfg.nb)
    bw = cfg.bandwidth * 1e9 if cfg.bandwidth else None
    pmax = cfg.pmax * 1e9 if cfg.pmax else (float("inf") if bw else None)
    rec = model_record(g, pmax, bw, iterations=1)
    if rec.get("p_max") == float("inf"):
        rec["p_max"] = None
    _emit_json(rec, cfg)


def cmd_scale_sim(cfg: RunConfig) -> None:
    from .scaling import modelled_costs, weak_scaling_plan

    if cfg.ns % cfg.nb:
        raise UsageError(f"n_b must divide n_s (n_s={cfg.ns}, n_b={cfg.nb})")
    bw = cfg.bandwidth * 1e9 if cfg.bandwidth else 470e9
    pmax = cfg.pmax * 1e9 if cfg.pmax else float("inf")
    records = []
    nscal = 1
    while nscal <= cfg.nscal:
        plan = weak_scaling_plan(nscal)
        rec = plan.as_dict()
        rec.update(modelled_costs(plan, cfg.ns, cfg.nb, cfg.np, bw, pmax, 10e9, 2e-6))
        records.append(rec)
        nscal *= 2
    if records[-1]["nscal"] != cfg.nscal:
        plan = weak_scaling_plan(cfg.nscal)
        rec = plan.as_dict()
        rec.update(modelled_costs(plan, cfg.ns, cfg.nb, cfg.np, bw, pmax, 10e9, 2e-6))
        records.append(rec)
    out = {"n_s": cfg.ns, "n_b": cfg.nb, "n_p": cfg.np, "bandwidth": bw, "plans": records}
    if cfg.execute:
        out["toy_check"] = _toy_scaling_check(cfg)
    _emit_json(out, cfg)


def _toy_scaling_check(cfg: RunConfig) -> dict:
    """Run the filter at a toy subdomain on a small grid and compare with serial."""
    from .blockvec import create_block_vector
    from .dist import filter_distributed, shard_and_distribute
    from .filter import apply_filter, filter_coefficients, spectral_map
    from .matrix import LatticeSpec, gershgorin_bounds, partition_rows, topi_generate

    # nscal=1 grid (1 x 2 x 1) with 4x4x4 subdomains
    H = topi_generate(LatticeSpec(4, 8, 4))
    workers = 2
    lo, hi = gershgorin_bounds(H)
    coeffs = filter_coefficients((-0.5, 0.5), spectral_map(lo, hi, 0.01), 20)
    X = create_block_vector(H.n, 4, 2, "random", seed=cfg.seed)
    serial = X.copy()
    apply_filter(H, serial, coeffs, 2)
    shards = shard_and_distribute(H, X, partition_rows(H, workers))
    Xd, _, tl = filter_distributed(shards, coeffs, 2, cfg.mode)
    err = float(np.max(np.abs(Xd.to_dense() - serial.to_dense())) / np.max(np.abs(serial.to_dense())))
    return {"lattice": [4, 8, 4], "workers": workers, "max_rel_diff": err, "simulated_time": tl.total}


HANDLERS = {
    "generate": cmd_generate,
    "solve": cmd_solve,
    "bench-kernel": cmd_bench_kernel,
    "bench-stream": cmd_bench_stream,
    "model": cmd_model,
    "scale-sim": cmd_scale_sim,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg, verbose = resolve_config(argv)
    except UsageError as exc:
        sys.stderr.write(f"chebfd: error: {exc}\n")
        return 1
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    sys.stderr.write(cfg.to_text())
    from .chebkernel import set_threads

    set_threads()
    try:
        HANDLERS[cfg.command](cfg)
    except (UsageError, ValueError, OSError) as exc:
        sys.stderr.write(f"chebfd: error: {exc}\n")
        return 1
    except Exception as exc:  # noqa: BLE001
        logging.getLogger(__name__).exception("internal error")
        sys.stderr.write(f"chebfd: internal error: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
