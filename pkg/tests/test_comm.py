import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blockgs.comm import CollectiveError, DeadlockError, SerialComm, SyncStats, deadlock_budget, \
    run_spmd
from blockgs.dense import householder_qr


def test_serial_allreduce_counts():
    c = SerialComm()
    M = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(c.allreduce_sum(M, "x"), M)
    assert c.stats.sync_count == 1
    assert c.stats.words_reduced == 6


def test_run_spmd_single_rank():
    assert run_spmd(1, lambda c: c.rank).results == [0]


def test_allreduce_of_ones():
    out = run_spmd(4, lambda c: c.allreduce_sum(np.ones((1, 1)), "one"))
    assert all(np.array_equal(r, [[4.0]]) for r in out.results)
    assert out.stats.sync_count == 1


def test_allreduce_of_ranks():
    out = run_spmd(4, lambda c: c.allreduce_sum([[c.rank]], "rank"))
    assert [float(r[0, 0]) for r in out.results] == [6.0] * 4


def test_allreduce_rank_order_oracle(rng):
    A = rng.standard_normal((30, 3))
    B = rng.standard_normal((30, 2))
    cuts = [(0, 10), (10, 20), (20, 30)]

    def body(c):
        lo, hi = cuts[c.rank]
        return c.allreduce_sum(A[lo:hi].T @ B[lo:hi], "gram")

    out = run_spmd(3, body)
    expect = A[0:10].T @ B[0:10]
    expect = expect + A[10:20].T @ B[10:20]
    expect = expect + A[20:30].T @ B[20:30]
    for r in out.results:
        assert np.array_equal(r, expect)


def test_results_bitwise_identical_across_ranks(rng):
    data = rng.standard_normal((5, 4, 4))
    out = run_spmd(5, lambda c: c.allreduce_sum(data[c.rank], "x"))
    assert all(np.array_equal(out.results[0], r) for r in out.results[1:])


def test_shape_mismatch_names_ranks():
    with pytest.raises(CollectiveError, match="rank 1"):
        run_spmd(2, lambda c: c.allreduce_sum(np.ones((c.rank + 1, 1)), "bad"))


def _stack_qr(a, b):
    return householder_qr(np.vstack([a, b]))[1]


def test_reduce_factor_tree_single_rank(rng):
    R = np.triu(rng.standard_normal((3, 3)))
    c = SerialComm()
    assert np.array_equal(c.reduce_factor_tree(R, _stack_qr), R)
    assert c.stats.sync_count == 1


def test_reduce_factor_tree_two_ranks_oracle(rng):
    Rs = [householder_qr(rng.standard_normal((6, 3)))[1] for _ in range(2)]
    out = run_spmd(2, lambda c: c.reduce_factor_tree(Rs[c.rank], _stack_qr, "tree"))
    expect = householder_qr(np.vstack(Rs))[1]
    assert np.allclose(out.results[0], expect, atol=1e-14)


def test_reduce_factor_tree_eight_ranks_rounds(rng):
    X = rng.standard_normal((64, 3))
    out = run_spmd(8, lambda c: c.reduce_factor_tree(
        householder_qr(X[8 * c.rank:8 * c.rank + 8])[1], _stack_qr, "tree"))
    assert out.stats.sync_count == 1
    assert out.stats.tree_rounds == 3
    assert np.allclose(np.abs(out.results[3]), np.abs(householder_qr(X)[1]), atol=1e-13)


def test_gather_rank_order():
    out = run_spmd(3, lambda c: c.gather(np.full((1, 2), c.rank)))
    assert np.array_equal(np.vstack(out.results[2]), [[0, 0], [1, 1], [2, 2]])
    assert out.stats.by_label["gather"] == 1


def test_deadlock_detected(monkeypatch):
    monkeypatch.setenv("BLOCKGS_DEADLOCK_BUDGET_MS", "200")

    def body(c):
        if c.rank == 0:
            c.allreduce_sum([[1.0]], "a")
            c.allreduce_sum([[1.0]], "b")
        else:
            c.allreduce_sum([[1.0]], "a")
            time.sleep(2.0)

    t0 = time.monotonic()
    with pytest.raises(DeadlockError, match="missing ranks \\[1\\]"):
        run_spmd(2, body)
    assert time.monotonic() - t0 < 5.0


def test_missing_rank_that_exits():
    def body(c):
        if c.rank == 0:
            c.allreduce_sum([[1.0]], "lonely")

    with pytest.raises(CollectiveError, match="exited"):
        run_spmd(3, body, budget=5.0)


def test_label_mismatch():
    with pytest.raises(CollectiveError, match="mismatch"):
        run_spmd(2, lambda c: c.allreduce_sum([[1.0]], f"label-{c.rank}"))


def test_worker_exception_reports_origin():
    def body(c):
        if c.rank == 2:
            raise RuntimeError("boom on two")
        c.allreduce_sum([[1.0]], "x")

    with pytest.raises(RuntimeError, match="boom on two") as info:
        run_spmd(4, body)
    assert info.value.spmd_rank == 2


def test_budget_from_environment(monkeypatch):
    monkeypatch.delenv("BLOCKGS_DEADLOCK_BUDGET_MS", raising=False)
    assert deadlock_budget() == 5.0
    monkeypatch.setenv("BLOCKGS_DEADLOCK_BUDGET_MS", "250")
    assert deadlock_budget() == 0.25


def test_sync_count_independent_of_p():
    def body(c):
        for i in range(5):
            c.allreduce_sum(np.ones((2, 2)), f"step-{i}")
        return None

    counts = {P: run_spmd(P, body).stats.sync_count for P in (1, 2, 3, 8)}
    assert set(counts.values()) == {5}


def test_stats_since_and_reset():
    s = SyncStats()
    s.record("gram:a", 4)
    before = s.copy()
    s.record("tree:b", 9)
    d = s.since(before)
    assert (d.sync_count, d.words_reduced, d.count("tree:")) == (1, 9, 1)
    s.reset()
    assert s.sync_count == 0 and not s.by_label


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 5), st.lists(st.integers(0, 3), min_size=1, max_size=6),
       st.randoms(use_true_random=False))
def test_randomized_interleavings_never_deadlock(P, ops, rnd):
    delays = [[rnd.random() * 2e-3 for _ in ops] for _ in range(P)]

    def body(c):
        total = 0.0
        for i, op in enumerate(ops):
            time.sleep(delays[c.rank][i])
            if op == 0:
                total += c.allreduce_sum([[c.rank]], f"s{i}")[0, 0]
            elif op == 1:
                total += len(c.gather(c.rank, f"g{i}"))
            elif op == 2:
                total += c.reduce_factor_tree(c.rank, max, f"t{i}", words=1)
            else:
                total += c.allreduce(c.rank, lambda a, b: a + b, f"r{i}", words=1)
        return total

    out = run_spmd(P, body, budget=5.0)
    assert len(set(out.results)) == 1
    assert out.stats.sync_count == len(ops)
