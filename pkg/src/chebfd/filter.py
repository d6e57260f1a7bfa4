"""Chebyshev window filter, blocked filter driver and the restarted eigensolver."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .blockvec import BlockVector, create_block_vector, seeded_normal, subblock_view, swap_blocks
from .chebkernel import MomentSeries, ShiftScale, TrafficCounter, cheb_init, chebfd_op, spmmv_shifted
from .matrix import gershgorin_bounds

__all__ = [
    "FilterCoefficients",
    "SolveResult",
    "EmptyBasisError",
    "spectral_map",
    "filter_coefficients",
    "jackson_damping",
    "apply_filter",
    "jacobi_eigh",
    "orthogonalize_svqb",
    "rayleigh_ritz",
    "chebfd_solve",
]

log = logging.getLogger(__name__)


class EmptyBasisError(ArithmeticError):
    """Every direction of the search space fell below the drop tolerance."""


@dataclass(frozen=True)
class FilterCoefficients:
    n_p: int
    c: np.ndarray
    g: np.ndarray
    window: tuple[float, float]
    map: ShiftScale

    def __post_init__(self):
        if self.c.shape != (self.n_p + 1,) or self.g.shape != (self.n_p + 1,):
            raise ValueError("need n_p+1 coefficients and damping factors")
        if not np.all(np.isfinite(self.c)):
            raise ValueError("coefficients must be finite")
        if self.g[0] != 1.0 or np.any(np.abs(self.g) > 1.0 + 1e-15):
            raise ValueError("damping factors need g_0 = 1 and |g_p| <= 1")

    @property
    def gc(self) -> np.ndarray:
        return self.g * self.c

    def mapped_window(self) -> tuple[float, float]:
        return float(self.map(self.window[0])), float(self.map(self.window[1]))

    def __call__(self, lam):
        """Scalar filter value at original-spectrum points ``lam``."""
        return np.polynomial.chebyshev.chebval(self.map(lam), self.gc)


def spectral_map(lambda_min: float, lambda_max: float, margin: float = 0.0) -> ShiftScale:
    """Affine map sending ``[lambda_min, lambda_max]`` into ``[-1/(1+margin), 1/(1+margin)]``."""
    if not lambda_max > lambda_min:
        raise ValueError(f"degenerate spectral interval [{lambda_min}, {lambda_max}]")
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    alpha = 2.0 / ((lambda_max - lambda_min) * (1.0 + margin))
    return ShiftScale(alpha, -alpha * (lambda_max + lambda_min) / 2.0)


def jackson_damping(n_p: int) -> np.ndarray:
    p = np.arange(n_p + 1)
    q = math.pi / (n_p + 1)
    return ((n_p - p + 1) * np.cos(p * q) + np.sin(p * q) / math.tan(q)) / (n_p + 1)


def filter_coefficients(window, map: ShiftScale, n_p: int, damping: str = "jackson") -> FilterCoefficients:
    """Chebyshev expansion of the indicator of ``window`` (original spectrum units)."""
    if n_p < 2:
        raise ValueError("polynomial degree must be at least 2")
    lo, hi = float(window[0]), float(window[1])
    a, b = float(map(lo)), float(map(hi))
    if not a < b:
        raise ValueError(f"empty window [{lo}, {hi}]")
    if a < -1.0 or b > 1.0:
        raise ValueError(f"window [{lo}, {hi}] maps outside [-1, 1]: [{a}, {b}]")
    ta, tb = math.acos(a), math.acos(b)
    p = np.arange(1, n_p + 1)
    c = np.empty(n_p + 1)
    c[0] = (ta - tb) / math.pi
    c[1:] = 2.0 / (math.pi * p) * (np.sin(p * ta) - np.sin(p * tb))
    if damping == "jackson":
        g = jackson_damping(n_p)
        g[0] = 1.0
    elif damping == "none":
        g = np.ones(n_p + 1)
    else:
        raise ValueError(f"unknown damping {damping!r}")
    return FilterCoefficients(n_p, c, g, (lo, hi), map)


def apply_filter(H, X: BlockVector, coeffs: FilterCoefficients, n_b: int | None = None,
                 counter: TrafficCounter | None = None) -> MomentSeries:
    """Replace X by ``sum_p g_p c_p T_p(alpha H + beta) X``, one panel at a time.

    Scratch storage is two panels of width ``n_b``; the degree loop runs
    innermost so each panel's working set stays small.
    """
    n_b = X.n_b if n_b is None else n_b
    if X.n_s % n_b:
        raise ValueError(f"n_b must divide n_s (n_s={X.n_s}, n_b={n_b})")
    if X.n != H.n:
        raise ValueError("block vector and matrix dimensions differ")
    work = X if X.n_b == n_b else X.reblock(n_b)
    s = coeffs.map
    gc = coeffs.gc
    moments = MomentSeries(coeffs.n_p, X.n_s)
    U = BlockVector(X.n, n_b, n_b)
    W = BlockVector(X.n, n_b, n_b)
    u, w = subblock_view(U, 0), subblock_view(W, 0)
    for b in range(work.n_panels):
        x = subblock_view(work, b)
        cheb_init(H, s, x, u, w, coeffs, counter=counter)
        for p in range(3, coeffs.n_p + 1):
            swap_blocks(w, u)
            chebfd_op(H, s, u, w, x, p, gc[p], out=moments, col0=b * n_b, counter=counter)
    if work is not X:
        filtered = work.to_dense()
        for b in range(X.n_panels):
            X.panel(b)[:] = filtered[:, b * X.n_b:(b + 1) * X.n_b]
    return moments


# --------------------------------------------------------------------------
# small dense Hermitian eigensolver

@njit(cache=True)
def _jacobi_sweeps(A, V, tol, max_sweeps):
    k = A.shape[0]
    for sweep in range(max_sweeps):
        off = 0.0
        total = 0.0
        for i in range(k):
            for j in range(k):
                a2 = A[i, j].real ** 2 + A[i, j].imag ** 2
                total += a2
                if i != j:
                    off += a2
        if math.sqrt(off) <= tol * math.sqrt(total) or off == 0.0:
            return sweep
        for p in range(k - 1):
            for q in range(p + 1, k):
                apq = A[p, q]
                mag = abs(apq)
                if mag == 0.0:
                    continue
                phase = apq / mag
                app = A[p, p].real
                aqq = A[q, q].real
                tau = (aqq - app) / (2.0 * mag)
                if tau >= 0:
                    t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                # V2 = diag(1, conj(phase)) @ [[c, s], [-s, c]]
                v00 = c + 0j
                v01 = s + 0j
                v10 = -s * np.conj(phase)
                v11 = c * np.conj(phase)
                for r in range(k):
                    arp = A[r, p]
                    arq = A[r, q]
                    A[r, p] = arp * v00 + arq * v10
                    A[r, q] = arp * v01 + arq * v11
                for r in range(k):
                    apr = A[p, r]
                    aqr = A[q, r]
                    A[p, r] = np.conj(v00) * apr + np.conj(v10) * aqr
                    A[q, r] = np.conj(v01) * apr + np.conj(v11) * aqr
                A[p, q] = 0.0
                A[q, p] = 0.0
                A[p, p] = A[p, p].real
                A[q, q] = A[q, q].real
                for r in range(V.shape[0]):
                    vrp = V[r, p]
                    vrq = V[r, q]
                    V[r, p] = vrp * v00 + vrq * v10
                    V[r, q] = vrp * v01 + vrq * v11
    return -1


def jacobi_eigh(S, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigen-decomposition of a small Hermitian matrix by cyclic Jacobi rotations.

    Returns ascending eigenvalues and the unitary matrix of eigenvectors.
    """
    A = np.array(S, dtype=np.complex128)
    A = 0.5 * (A + A.conj().T)
    k = A.shape[0]
    V = np.eye(k, dtype=np.complex128)
    if k == 0:
        return np.zeros(0), V
    if _jacobi_sweeps(A, V, tol, max_sweeps) < 0:
        raise ArithmeticError("Jacobi iteration did not converge")
    theta = A.diagonal().real.copy()
    order = np.argsort(theta, kind="stable")
    return theta[order], V[:, order]


# --------------------------------------------------------------------------
# orthogonalization and projection

def _dense(X):
    return X.to_dense() if isinstance(X, BlockVector) else np.asarray(X, dtype=np.complex128)


def _as_block(Q: np.ndarray, n_b: int) -> BlockVector:
    k = Q.shape[1]
    return BlockVector.from_dense(Q, n_b if k % n_b == 0 else 1)


def orthogonalize_svqb(X, drop_tol: float = 1e-12, n_b: int | None = None):
    """Rank-revealing SVQB orthonormalization.

    Eigen-decomposes the scaled Gram matrix, drops directions with relative
    eigenvalue below ``drop_tol`` and returns ``(Q, rank)``. A second pass
    runs when the first leaves ``||Q^H Q - I||_max`` above 1e-12.
    """
    Xd = _dense(X)
    if n_b is None:
        n_b = X.n_b if isinstance(X, BlockVector) else 1
    if not np.all(np.isfinite(Xd)):
        raise ValueError("search vectors contain non-finite values")
    Q = Xd
    for _ in range(2):
        S = Q.conj().T @ Q
        d = np.sqrt(np.abs(S.diagonal().real))
        if not np.any(d > 0):
            raise EmptyBasisError("all search vectors are zero")
        scale = np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 0.0)
        lam, V = jacobi_eigh(S * np.outer(scale, scale))
        keep = lam > drop_tol * lam.max()
        if not np.any(keep):
            raise EmptyBasisError("no direction above the drop tolerance")
        Q = (Q * scale) @ (V[:, keep] / np.sqrt(lam[keep]))
        err = np.max(np.abs(Q.conj().T @ Q - np.eye(Q.shape[1])))
        if err <= 1e-12:
            break
    return _as_block(Q, n_b), Q.shape[1]


def _apply_H(H, Q: np.ndarray) -> np.ndarray:
    Q = np.ascontiguousarray(Q)
    HQ = np.empty_like(Q)
    spmmv_shifted(H, ShiftScale(1.0, 0.0), Q, HQ)
    return HQ


def rayleigh_ritz(H, Q, orth_tol: float = 1e-8):
    """Project H onto the orthonormal basis Q.

    Returns ascending Ritz values, the rotated basis ``Y = Q V`` and residual
    norms ``||H y - theta y||``.
    """
    Qd = _dense(Q)
    k = Qd.shape[1]
    err = np.max(np.abs(Qd.conj().T @ Qd - np.eye(k))) if k else 0.0
    if err > orth_tol:
        raise ValueError(f"basis is not orthonormal (max deviation {err:.2e})")
    HQ = _apply_H(H, Qd)
    theta, V = jacobi_eigh(Qd.conj().T @ HQ)
    Y = Qd @ V
    R = HQ @ V - Y * theta
    res = np.linalg.norm(R, axis=0) / np.linalg.norm(Y, axis=0)
    n_b = Q.n_b if isinstance(Q, BlockVector) else 1
    return theta, _as_block(Y, n_b), res


# --------------------------------------------------------------------------
# restarted solver

@dataclass
class SolveResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    residuals: np.ndarray
    moments: list[MomentSeries]
    iterations: int
    converged: bool
    window: tuple[float, float]
    ritz_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ritz_residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))


def chebfd_solve(H, window, n_s: int, n_b: int, n_p: int, max_restarts: int = 30,
                 res_tol: float = 1e-9, *, seed: int = 0, damping: str = "jackson",
                 bounds: tuple[float, float] | None = None, margin: float = 0.01,
                 drop_tol: float = 1e-12) -> SolveResult:
    """Interior eigenpairs of H inside ``window`` by restarted Chebyshev filtering.

    Each restart filters the search block, orthonormalises it with SVQB and
    extracts Ritz pairs. The loop stops once every Ritz value strictly inside
    the window has a residual below ``res_tol`` and the in-window count did
    not change since the previous restart (``converged=True``). It also stops,
    unconverged, when the converged count is stable and the remaining
    in-window residuals stagnate.
    """
    if n_s % n_b:
        raise ValueError(f"n_b must divide n_s (n_s={n_s}, n_b={n_b})")
    lo, hi = float(window[0]), float(window[1])
    if bounds is None:
        bounds = gershgorin_bounds(H)
    if not (bounds[0] <= lo < hi <= bounds[1]):
        raise ValueError(f"window [{lo}, {hi}] not inside spectral bounds {bounds}")
    s = spectral_map(bounds[0], bounds[1], margin)
    coeffs = filter_coefficients((lo, hi), s, n_p, damping)

    X = create_block_vector(H.n, n_s, n_b, "random", seed=seed)
    history: list[MomentSeries] = []
    prev_count = prev_good = -1
    prev_stuck = np.inf
    theta = res = np.zeros(0)
    Y = np.zeros((H.n, 0), dtype=np.complex128)
    done = False
    it = 0
    for it in range(1, max_restarts + 1):
        history.append(apply_filter(H, X, coeffs, n_b))
        Q, rank = orthogonalize_svqb(X, drop_tol, n_b)
        theta, Yb, res = rayleigh_ritz(H, Q)
        Y = Yb.to_dense()
        inside = (theta > lo) & (theta < hi)
        count = int(inside.sum())
        log.debug("restart %d: rank %d, %d Ritz values in window, max residual %.2e",
                  it, rank, count, res[inside].max(initial=0.0))
        good = inside & (res <= res_tol)
        if count == prev_count and np.all(res[inside] <= res_tol):
            done = True
            break
        # in-window pairs that stop improving are mixtures of out-of-window
        # states (e.g. symmetric clusters); they never converge
        stuck = res[inside & ~good].min(initial=np.inf)
        if it >= 3 and int(good.sum()) == prev_good and stuck >= 0.5 * prev_stuck:
            break
        prev_count, prev_good, prev_stuck = count, int(good.sum()), stuck
        if rank < n_s:
            fill = seeded_normal(seed + it, np.arange(H.n)[:, None], np.arange(rank, n_s)[None, :])
            Y = np.hstack([Y, fill])
        X = BlockVector.from_dense(Y, n_b)

    keep = (theta > lo) & (theta < hi) & (res <= res_tol)
    return SolveResult(
        eigenvalues=theta[keep],
        eigenvectors=Y[:, :theta.size][:, keep],
        residuals=res[keep],
        moments=history,
        iterations=it,
        converged=done,
        window=(lo, hi),
        ritz_values=theta,
        ritz_residuals=res,
    )
