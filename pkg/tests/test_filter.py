import math

import numpy as np
import pytest

from chebfd.blockvec import BlockVector, create_block_vector
from chebfd.chebkernel import ShiftScale
from chebfd.filter import (
    EmptyBasisError,
    apply_filter,
    chebfd_solve,
    filter_coefficients,
    jacobi_eigh,
    orthogonalize_svqb,
    rayleigh_ritz,
    spectral_map,
)
from chebfd.matrix import gershgorin_bounds

from conftest import diag_crs, hermitian_crs, random_hermitian, rel_err


def scalar_filter(coeffs, lam):
    """Independent evaluation: sum g_p c_p cos(p arccos x)."""
    x = np.clip(coeffs.map(np.asarray(lam, dtype=float)), -1, 1)
    p = np.arange(coeffs.n_p + 1)
    return np.cos(np.multiply.outer(np.arccos(x), p)) @ coeffs.gc


def test_spectral_map_examples():
    s = spectral_map(-1, 1)
    assert (s.alpha, s.beta) == (1.0, 0.0)
    s = spectral_map(0, 2)
    assert (s.alpha, s.beta) == (1.0, -1.0)
    s = spectral_map(-3, 5, 0.05)
    assert s.alpha == pytest.approx(2 / (8 * 1.05), rel=1e-15)
    assert s.beta == pytest.approx(-2 / (8 * 1.05), rel=1e-15)
    assert s.alpha == pytest.approx(0.238095238095, rel=1e-11)
    with pytest.raises(ValueError):
        spectral_map(1, 1)


def test_spectral_map_margin_range():
    s = spectral_map(-2.0, 7.0, 0.1)
    assert s(-2.0) == pytest.approx(-1 / 1.1) and s(7.0) == pytest.approx(1 / 1.1)


def test_coefficients_identity_window():
    co = filter_coefficients((-1, 1), ShiftScale(1.0, 0.0), 10)
    assert co.c[0] == 1.0
    assert np.allclose(co.c[1:], 0, atol=1e-15)


def test_coefficients_symmetric_window_even():
    co = filter_coefficients((-0.3, 0.3), ShiftScale(1.0, 0.0), 21)
    assert np.allclose(co.c[1::2], 0, atol=1e-15)
    assert np.any(np.abs(co.c[2::2]) > 1e-3)


def test_jackson_small_degree():
    co = filter_coefficients((-0.5, 0.5), ShiftScale(1.0, 0.0), 2)
    # (2 cos(pi/3) + sin(pi/3) cot(pi/3)) / 3 = (1 + 1/2) / 3
    assert co.g[1] == pytest.approx(0.5, abs=1e-15)
    assert co.g[0] == 1.0


def test_jackson_bounds_and_none():
    co = filter_coefficients((-0.5, 0.1), ShiftScale(1.0, 0.0), 300)
    assert co.g[0] == 1.0 and np.all(np.abs(co.g) <= 1.0)
    none = filter_coefficients((-0.5, 0.1), ShiftScale(1.0, 0.0), 30, "none")
    assert np.all(none.g == 1.0)


def test_coefficients_reject_window_outside():
    with pytest.raises(ValueError):
        filter_coefficients((0.5, 2.0), ShiftScale(1.0, 0.0), 10)
    with pytest.raises(ValueError):
        filter_coefficients((0.2, 0.1), ShiftScale(1.0, 0.0), 10)


def test_filter_suppression_three_point():
    H = diag_crs([-0.9, 0.0, 0.9])
    lo, hi = gershgorin_bounds(H)
    co = filter_coefficients((-0.1, 0.1), spectral_map(lo, hi, 0.01), 100)
    X = BlockVector.from_dense(np.eye(3), 1)
    apply_filter(H, X, co, 1)
    f = np.diag(X.to_dense()).real
    oracle = scalar_filter(co, [-0.9, 0.0, 0.9])
    assert np.allclose(f, oracle, atol=1e-12)
    assert abs(f[1]) / abs(f[0]) > 1e3 and abs(f[1]) / abs(f[2]) > 1e3


def test_filter_suppression_improves_with_degree():
    s = spectral_map(-0.9, 0.9, 0.01)
    out = [abs(scalar_filter(filter_coefficients((-0.1, 0.1), s, n_p), 0.9)) for n_p in (50, 100, 200, 400)]
    assert all(b <= a for a, b in zip(out, out[1:]))


def test_apply_filter_on_diagonal_is_scalar_polynomial(rng):
    d = np.sort(rng.uniform(-2, 3, size=40))
    H = diag_crs(d)
    lo, hi = gershgorin_bounds(H)
    co = filter_coefficients((0.1, 0.7), spectral_map(lo, hi, 0.01), 60)
    X0 = create_block_vector(40, 6, 3, "random", seed=4)
    X = X0.copy()
    apply_filter(H, X, co)
    expected = scalar_filter(co, d)[:, None] * X0.to_dense()
    assert rel_err(X.to_dense(), expected) <= 1e-12


def test_apply_filter_blocking_independent(rng):
    a = random_hermitian(80, rng, density=0.08)
    H = hermitian_crs(a)
    lo, hi = gershgorin_bounds(H)
    co = filter_coefficients((lo / 4, hi / 5), spectral_map(lo, hi, 0.01), 40)
    base = create_block_vector(80, 8, 8, "random", seed=9)
    results = {}
    for nb in (1, 2, 4, 8):
        X = base.reblock(nb)
        m = apply_filter(H, X, co, nb)
        results[nb] = (X.to_dense(), m)
    ref, mref = results[8]
    for nb, (x, m) in results.items():
        assert rel_err(x, ref) <= 1e-12
        assert rel_err(m.mu, mref.mu) <= 1e-12


def test_apply_filter_reblocks_when_nb_differs(rng):
    H = hermitian_crs(random_hermitian(30, rng))
    lo, hi = gershgorin_bounds(H)
    co = filter_coefficients((lo / 2, hi / 2), spectral_map(lo, hi, 0.01), 12)
    a = create_block_vector(30, 4, 4, "random", seed=1)
    b = a.copy()
    apply_filter(H, a, co, 1)
    apply_filter(H, b, co, 4)
    assert a.n_b == 4 and rel_err(a.to_dense(), b.to_dense()) <= 1e-12


def test_apply_filter_moments_nonnegative(rng):
    H = hermitian_crs(random_hermitian(50, rng, density=0.1))
    lo, hi = gershgorin_bounds(H)
    co = filter_coefficients((lo / 3, 0.0), spectral_map(lo, hi, 0.01), 50)
    m = apply_filter(H, create_block_vector(50, 4, 2, "random", seed=2), co)
    assert np.all(m.mu.real >= -1e-12 * np.abs(m.mu).max())
    assert np.all(np.abs(m.mu.imag) <= 1e-12 * np.abs(m.mu))


def test_jacobi_matches_dense_oracle(rng):
    a = random_hermitian(25, rng, density=1.0)
    theta, V = jacobi_eigh(a)
    assert np.allclose(theta, np.linalg.eigvalsh(a), atol=1e-11)
    assert np.allclose(V.conj().T @ a @ V, np.diag(theta), atol=1e-11)
    assert np.allclose(V.conj().T @ V, np.eye(25), atol=1e-13)


def test_svqb_orthonormal_input():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(40, 6)) + 0j)
    Q, rank = orthogonalize_svqb(q)
    assert rank == 6
    Qd = Q.to_dense()
    assert np.max(np.abs(Qd.conj().T @ Qd - np.eye(6))) <= 1e-12


def test_svqb_duplicated_column(rng):
    X = rng.normal(size=(30, 5)) + 1j * rng.normal(size=(30, 5))
    X[:, 3] = X[:, 1]
    assert np.linalg.matrix_rank(X.conj().T @ X) == 4
    Q, rank = orthogonalize_svqb(X, 1e-10)
    assert rank == 4
    Qd = Q.to_dense()
    assert np.max(np.abs(Qd.conj().T @ Qd - np.eye(4))) <= 1e-10


def test_svqb_random_gaussian():
    X = create_block_vector(100, 8, 4, "random", seed=17)
    Q, rank = orthogonalize_svqb(X)
    Qd = Q.to_dense()
    assert rank == 8 and Q.n_b == 4
    assert np.max(np.abs(Qd.conj().T @ Qd - np.eye(8))) <= 1e-10
    # same span
    proj = Qd @ (Qd.conj().T @ X.to_dense())
    assert rel_err(proj, X.to_dense()) <= 1e-12


def test_svqb_badly_scaled_columns(rng):
    X = rng.normal(size=(60, 4)) * np.array([1e-6, 1.0, 1e5, 3.0])
    Q, rank = orthogonalize_svqb(X.astype(complex))
    Qd = Q.to_dense()
    assert rank == 4 and np.max(np.abs(Qd.conj().T @ Qd - np.eye(4))) <= 1e-10


def test_svqb_empty_basis():
    with pytest.raises(EmptyBasisError):
        orthogonalize_svqb(np.zeros((5, 2), dtype=complex))


def test_rayleigh_ritz_unit_vectors():
    d = np.array([3.0, -1.0, 0.5, 2.0, 7.0])
    H = diag_crs(d)
    Q = np.eye(5, dtype=complex)[:, [1, 3, 4]]
    theta, Y, res = rayleigh_ritz(H, Q)
    assert np.allclose(theta, [-1.0, 2.0, 7.0], atol=1e-14)
    assert np.all(res <= 1e-14)


def test_rayleigh_ritz_invariant_subspace(rng):
    a = random_hermitian(40, rng, density=0.2)
    H = hermitian_crs(a)
    w, v = np.linalg.eigh(a)
    mix, _ = np.linalg.qr(rng.normal(size=(5, 5)) + 1j * rng.normal(size=(5, 5)))
    theta, Y, res = rayleigh_ritz(H, v[:, 10:15] @ mix)
    norm = np.abs(w).max()
    assert np.allclose(theta, w[10:15], atol=1e-12 * norm)
    assert np.all(res <= 1e-12 * norm)


def test_rayleigh_ritz_full_basis(rng):
    a = random_hermitian(30, rng, density=0.4)
    theta, _, _ = rayleigh_ritz(hermitian_crs(a), np.eye(30, dtype=complex))
    assert np.allclose(theta, np.linalg.eigvalsh(a), atol=1e-10)


def test_rayleigh_ritz_rejects_non_orthonormal(rng):
    H = diag_crs(np.arange(5.0))
    with pytest.raises(ValueError):
        rayleigh_ritz(H, 2 * np.eye(5, dtype=complex)[:, :2])


def test_solve_linspace_twenty():
    d = np.linspace(-1, 1, 1000)
    H = diag_crs(d)
    lo, hi = (d[489] + d[490]) / 2, (d[509] + d[510]) / 2
    res = chebfd_solve(H, (lo, hi), 32, 8, 500, 20, 1e-9)
    assert res.converged
    assert res.eigenvalues.size == 20
    assert np.max(np.abs(res.eigenvalues - d[490:510])) <= 1e-8
    assert np.all(np.diff(res.eigenvalues) > 0)
    assert len(res.moments) == res.iterations


def test_solve_topi_matches_dense(topi444):
    res = chebfd_solve(topi444, (-0.5, 0.5), 16, 4, 300, 20, 1e-9)
    ev = np.linalg.eigvalsh(topi444.to_dense())
    inside = ev[(ev > -0.5) & (ev < 0.5)]
    assert res.eigenvalues.size == inside.size
    assert np.max(np.abs(res.eigenvalues - inside)) <= 1e-8
    assert np.all(res.residuals <= 1e-9)


def test_solve_window_in_gap():
    d = np.linspace(-1, 1, 400)
    d = d[np.abs(d) > 0.3]
    res = chebfd_solve(diag_crs(d), (-0.1, 0.1), 16, 8, 200, 10, 1e-9)
    assert res.eigenvalues.size == 0


def test_solve_blocking_invariance():
    d = np.linspace(-1, 1, 300)
    H = diag_crs(d)
    lo, hi = (d[139] + d[140]) / 2, (d[149] + d[150]) / 2
    vals = [chebfd_solve(H, (lo, hi), 16, nb, 200, 15, 1e-10, seed=3).eigenvalues for nb in (1, 4, 16)]
    for v in vals[1:]:
        assert v.size == vals[0].size == 10
        assert np.max(np.abs(v - vals[0])) <= 1e-10


def test_solve_rejects_bad_blocking_and_window(topi444):
    with pytest.raises(ValueError, match="divide"):
        chebfd_solve(topi444, (-0.1, 0.1), 10, 3, 50)
    with pytest.raises(ValueError):
        chebfd_solve(topi444, (-100, 0.1), 8, 4, 50)
