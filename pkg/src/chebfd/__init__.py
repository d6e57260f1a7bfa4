"""Chebyshev filter diagonalization for interior eigenvalues of sparse Hermitian matrices."""
import os

# numba otherwise probes an outdated system TBB and warns on every import
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from .blockvec import BlockVector, create_block_vector, subblock_view, swap_blocks
from .chebkernel import MomentSeries, ShiftScale, chebfd_op, chebfd_op_reference, spmmv_shifted
from .filter import apply_filter, chebfd_solve, filter_coefficients, spectral_map
from .matrix import LatticeSpec, SparseMatrixCRS, gershgorin_bounds, partition_rows, topi_generate

__version__ = "0.1.0"
