import numpy as np
import pytest

from chebfd.matrix import LatticeSpec, SparseMatrixCRS, topi_generate


def random_hermitian(n, rng, density=0.3):
    a = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    a *= rng.random((n, n)) < density
    a = a + a.conj().T
    np.fill_diagonal(a, a.diagonal().real + 1.0)
    return a


def hermitian_crs(a):
    return SparseMatrixCRS.from_dense(a, "hermitian")


def diag_crs(d):
    return SparseMatrixCRS.from_dense(np.diag(np.asarray(d, dtype=float)), "hermitian")


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture(scope="session")
def topi444():
    return topi_generate(LatticeSpec(4, 4, 4))


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = np.max(np.abs(b))
    return float(np.max(np.abs(a - b)) / scale) if scale else float(np.max(np.abs(a - b)))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
