import itertools

import numpy as np
import pytest

from chebfd.blockvec import create_block_vector, subblock_view
from chebfd.chebkernel import TrafficCounter, spmmv_shifted, ShiftScale
from chebfd.dist import (
    DistributedRunError,
    InProcessTransport,
    ProtocolError,
    SocketTransport,
    decode_frame,
    decode_tag,
    encode_frame,
    encode_tag,
    filter_distributed,
    gather_rows,
    halo_exchange,
    shard_and_distribute,
    simulate_timeline,
    timeline_formula,
)
from chebfd.filter import apply_filter, filter_coefficients, spectral_map
from chebfd.matrix import gershgorin_bounds, partition_rows

from conftest import rel_err


@pytest.fixture(scope="module")
def coeffs50(topi444):
    lo, hi = gershgorin_bounds(topi444)
    return filter_coefficients((-0.2, 0.2), spectral_map(lo, hi, 0.01), 50)


def serial_run(H, coeffs, n_s=8, n_b=2, seed=5, counter=None):
    X = create_block_vector(H.n, n_s, n_b, "random", seed=seed)
    m = apply_filter(H, X, coeffs, n_b, counter=counter)
    return X, m


def test_single_worker_shard_is_original(topi444):
    X = create_block_vector(topi444.n, 4, 2, "random", seed=1)
    (sh,) = shard_and_distribute(topi444, X, partition_rows(topi444, 1))
    assert sh.n_halo == 0 and sh.n_local == topi444.n
    assert np.array_equal(sh.matrix.row_ptr, topi444.row_ptr)
    assert np.array_equal(sh.matrix.col_idx, topi444.col_idx)
    assert np.array_equal(sh.matrix.values, topi444.values)


@pytest.mark.parametrize("workers", [2, 3, 4])
def test_reassembly_bit_identical(topi444, workers):
    X = create_block_vector(topi444.n, 6, 3, "random", seed=2)
    shards = shard_and_distribute(topi444, X, partition_rows(topi444, workers))
    assert np.array_equal(gather_rows(shards).to_dense(), X.to_dense())
    rows = []
    for sh in shards:
        lo, _ = sh.row_range
        m = sh.matrix
        glob = np.concatenate([np.arange(lo, lo + sh.n_local), sh.halo_rows])
        for r in range(sh.n_local):
            cols = glob[m.col_idx[m.row_ptr[r]:m.row_ptr[r + 1]]]
            rows.append((lo + r, tuple(cols), tuple(m.values[m.row_ptr[r]:m.row_ptr[r + 1]])))
    H = topi444
    for i, cols, vals in rows:
        s = slice(H.row_ptr[i], H.row_ptr[i + 1])
        assert cols == tuple(H.col_idx[s]) and vals == tuple(H.values[s])


def test_local_columns_within_bounds(topi444):
    X = create_block_vector(topi444.n, 2, 2)
    for sh in shard_and_distribute(topi444, X, partition_rows(topi444, 4)):
        assert sh.matrix.col_idx.min() >= 0
        assert sh.matrix.col_idx.max() < sh.n_local + sh.n_halo
        assert sh.X.n == sh.n_local + sh.n_halo


def test_plan_mismatch_rejected(topi444):
    X = create_block_vector(topi444.n - 4, 2, 2)
    with pytest.raises(ValueError):
        shard_and_distribute(topi444, X, partition_rows(topi444, 2))


def _exchange_all(shards, b=0, degree=0):
    for sh in shards:
        halo_exchange(sh, subblock_view(sh.X, b), "init", degree)
    for sh in shards:
        halo_exchange(sh, subblock_view(sh.X, b), "finalize", degree)


@pytest.mark.parametrize("workers", [2, 4])
def test_halo_values_resolve_to_owner(topi444, workers):
    X = create_block_vector(topi444.n, 4, 2, "random", seed=3)
    shards = shard_and_distribute(topi444, X, partition_rows(topi444, workers))
    _exchange_all(shards, 1)
    full = X.panel(1)
    for sh in shards:
        n = sh.n_local
        assert np.array_equal(sh.X.panel(1)[n:], full[sh.halo_rows])
    # local product with halo equals the global product on owned rows
    s = ShiftScale(0.7, 0.1)
    ref = X.panel(1).copy()
    spmmv_shifted(topi444, s, X.panel(1), ref)
    for sh in shards:
        out = np.zeros_like(sh.X.panel(1))
        spmmv_shifted(sh.matrix, s, sh.X.panel(1), out)
        lo, hi = sh.row_range
        assert np.allclose(out[:sh.n_local], ref[lo:hi], rtol=0, atol=1e-14)


def test_halo_protocol_errors(topi444):
    X = create_block_vector(topi444.n, 4, 2, "random", seed=3)
    sh0, sh1 = shard_and_distribute(topi444, X, partition_rows(topi444, 2))
    v = subblock_view(sh0.X, 0)
    with pytest.raises(ProtocolError):
        halo_exchange(sh0, v, "finalize")
    halo_exchange(sh0, v, "init")
    with pytest.raises(ProtocolError):
        halo_exchange(sh0, v, "init")
    halo_exchange(sh1, subblock_view(sh1.X, 0), "init")
    with pytest.raises(ProtocolError):
        halo_exchange(sh0, v, "finalize", degree=7)
    with pytest.raises(ValueError):
        halo_exchange(sh0, v, "wait")


def test_overlapped_exchange_matches_blocking(topi444):
    X = create_block_vector(topi444.n, 4, 2, "random", seed=4)
    plan = partition_rows(topi444, 2)
    blocking = shard_and_distribute(topi444, X, plan)
    _exchange_all(blocking, 0)
    over = shard_and_distribute(topi444, X, plan)
    for sh in over:
        halo_exchange(sh, subblock_view(sh.X, 0), "init")
    s = ShiftScale(1.0, 0.0)
    for sh in over:
        # unrelated compute on the other panel while the exchange is in flight
        p1 = sh.X.panel(1)
        spmmv_shifted(sh.matrix, s, p1, np.zeros_like(p1))
        sh.X.panel(1)[: sh.n_local] *= 2
    for sh in over:
        halo_exchange(sh, subblock_view(sh.X, 0), "finalize")
    for a, b in zip(blocking, over):
        assert np.array_equal(a.X.panel(0), b.X.panel(0))


def test_single_worker_exchange_is_noop(topi444):
    X = create_block_vector(topi444.n, 2, 2, "random", seed=1)
    (sh,) = shard_and_distribute(topi444, X, partition_rows(topi444, 1))
    before = sh.X.panel(0).copy()
    halo_exchange(sh, subblock_view(sh.X, 0), "init")
    halo_exchange(sh, subblock_view(sh.X, 0), "finalize")
    assert np.array_equal(before, sh.X.panel(0))


@pytest.mark.parametrize("workers,mode", list(itertools.product([1, 2, 4], ["vector", "pipelined"])))
def test_mode_equivalence(topi444, coeffs50, workers, mode):
    Xs, ms = serial_run(topi444, coeffs50)
    X0 = create_block_vector(topi444.n, 8, 2, "random", seed=5)
    shards = shard_and_distribute(topi444, X0, partition_rows(topi444, workers))
    X, m, tl = filter_distributed(shards, coeffs50, 2, mode)
    assert rel_err(X.to_dense(), Xs.to_dense()) <= 1e-12
    assert rel_err(m.eta, ms.eta) <= 1e-12
    assert rel_err(m.mu, ms.mu) <= 1e-12


@pytest.mark.parametrize("nb", [1, 4, 8])
def test_mode_equivalence_other_blockings(topi444, coeffs50, nb):
    Xs, ms = serial_run(topi444, coeffs50, n_b=nb)
    X0 = create_block_vector(topi444.n, 8, nb, "random", seed=5)
    for mode in ("vector", "pipelined"):
        shards = shard_and_distribute(topi444, X0, partition_rows(topi444, 4))
        X, m, _ = filter_distributed(shards, coeffs50, nb, mode)
        assert rel_err(X.to_dense(), Xs.to_dense()) <= 1e-12
        assert rel_err(m.mu, ms.mu) <= 1e-12


def test_pipelined_degenerates_with_one_block(topi444, coeffs50):
    X0 = create_block_vector(topi444.n, 4, 4, "random", seed=6)
    out = {}
    for mode in ("vector", "pipelined"):
        shards = shard_and_distribute(topi444, X0, partition_rows(topi444, 2))
        out[mode] = filter_distributed(shards, coeffs50, 4, mode)
    assert out["vector"][2].shape() == out["pipelined"][2].shape()
    assert out["vector"][2].total == out["pipelined"][2].total
    assert np.array_equal(out["vector"][0].to_dense(), out["pipelined"][0].to_dense())


def test_pipelined_timeline_causality(topi444, coeffs50):
    X0 = create_block_vector(topi444.n, 8, 2, "random", seed=6)
    shards = shard_and_distribute(topi444, X0, partition_rows(topi444, 2))
    _, _, tl = filter_distributed(shards, coeffs50, 2, "pipelined", comm_cost=1.0, compute_cost=2.0)
    for events in tl.events:
        waits = {(e.block, e.degree): e.end for e in events if e.kind == "comm_wait"}
        computes = [e for e in events if e.kind == "compute"]
        for e in computes:
            assert e.start >= waits[e.block, e.degree]
        for a, b in zip(computes, computes[1:]):
            assert b.start >= a.end
    B, D = 4, 48
    assert tl.total == timeline_formula(B, D, 1.0, 2.0, "pipelined")


def test_pipelined_write_counts_match_serial(topi444, coeffs50):
    serial = TrafficCounter()
    serial_run(topi444, coeffs50, counter=serial)
    for mode in ("vector", "pipelined"):
        X0 = create_block_vector(topi444.n, 8, 2, "random", seed=5)
        shards = shard_and_distribute(topi444, X0, partition_rows(topi444, 2))
        counters = [TrafficCounter() for _ in shards]
        filter_distributed(shards, coeffs50, 2, mode, counters=counters)
        for c in counters:
            assert c.panel_writes == serial.panel_writes
            assert c.matrix_sweeps == serial.matrix_sweeps


def test_simulate_timeline_example():
    assert simulate_timeline(4, 1, 1, 2, "vector") == 12
    assert simulate_timeline(4, 1, 1, 2, "pipelined") == 9


def test_simulate_timeline_matches_formula_and_bounds():
    for B, D, c, k in itertools.product([1, 2, 3, 4, 8], [1, 3], [0.0, 0.5, 1.0, 2.0, 7.0], [0.25, 1.0, 2.0, 5.0]):
        v = simulate_timeline(B, D, c, k, "vector")
        p = simulate_timeline(B, D, c, k, "pipelined")
        assert v == pytest.approx(timeline_formula(B, D, c, k, "vector"), rel=1e-14)
        assert p == pytest.approx(timeline_formula(B, D, c, k, "pipelined"), rel=1e-14)
        assert 1.0 <= v / p <= 2.0 + 1e-14


def test_simulate_timeline_trivial_cases():
    assert simulate_timeline(5, 3, 0.0, 2.0, "vector") == simulate_timeline(5, 3, 0.0, 2.0, "pipelined") == 30
    assert simulate_timeline(1, 4, 1.5, 2.0, "vector") == simulate_timeline(1, 4, 1.5, 2.0, "pipelined") == 14
    with pytest.raises(ValueError):
        simulate_timeline(0, 1, 1, 1, "vector")
    with pytest.raises(ValueError):
        simulate_timeline(2, 1, 1, 1, "ring")


def test_tag_roundtrip():
    for d, b, n in [(0, 0, 0), (16383, 255, 1023), (500, 3, 17)]:
        t = encode_tag(d, b, n)
        assert 0 <= t < 2**32 and decode_tag(t) == (d, b, n)
    with pytest.raises(ValueError):
        encode_tag(16384, 0, 0)


def test_frame_roundtrip():
    payload = (np.arange(6) + 1j * np.arange(6)).reshape(3, 2)
    buf = encode_frame(encode_tag(4, 1, 2), payload)
    assert len(buf) == 12 + 6 * 16
    tag, data, rest = decode_frame(buf + b"xyz")
    assert decode_tag(tag) == (4, 1, 2)
    assert np.array_equal(data, payload.ravel()) and rest == b"xyz"


@pytest.mark.parametrize("mode", ["vector", "pipelined"])
def test_socket_transport_matches_inprocess(topi444, coeffs50, mode):
    X0 = create_block_vector(topi444.n, 4, 2, "random", seed=8)
    plan = partition_rows(topi444, 2)
    ref, mref, _ = filter_distributed(shard_and_distribute(topi444, X0, plan), coeffs50, 2, mode)
    tr = SocketTransport()
    try:
        X, m, _ = filter_distributed(shard_and_distribute(topi444, X0, plan, tr), coeffs50, 2, mode)
    finally:
        tr.close()
    assert np.array_equal(X.to_dense(), ref.to_dense())
    assert np.array_equal(m.mu, mref.mu)


class _FailingTransport(InProcessTransport):
    def take(self, src, dst, tag):
        if decode_tag(tag)[0] == 10:
            raise ConnectionError("link down")
        return super().take(src, dst, tag)


def test_worker_failure_aborts_run(topi444, coeffs50):
    X0 = create_block_vector(topi444.n, 4, 2, "random", seed=8)
    shards = shard_and_distribute(topi444, X0, partition_rows(topi444, 2), _FailingTransport())
    with pytest.raises(DistributedRunError, match="link down"):
        filter_distributed(shards, coeffs50, 2, "pipelined")
