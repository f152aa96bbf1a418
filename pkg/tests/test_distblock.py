import numpy as np
import pytest
from hypothesis import given, strategies as st

from blockgs.comm import SerialComm, run_spmd
from blockgs.dense import gram, householder_qr
from blockgs.distblock import (
    DistBlockMatrix, distribute, fused_gram, gather, local_axpy_block, replicated_digest,
    row_range, scale_right_block, shard_rows,
)
from blockgs.variants import Variant, factorize
from conftest import U, geometric


def test_single_rank_shard_is_whole(rng):
    X = rng.standard_normal((7, 4))
    D = distribute(X, 2, SerialComm())
    assert np.array_equal(D.local, X) and D.q == 2


def test_ceiling_split():
    assert shard_rows(10, 4) == [3, 3, 3, 1]


@given(st.integers(0, 200), st.integers(1, 16))
def test_partition_covers_rows(n, P):
    ranges = [row_range(n, P, r) for r in range(P)]
    assert sum(hi - lo for lo, hi in ranges) == n
    flat = [i for lo, hi in ranges for i in range(lo, hi)]
    assert flat == list(range(n))


@pytest.mark.parametrize("P", [1, 2, 3, 4, 8])
def test_gather_round_trip(rng, P):
    X = rng.standard_normal((21, 6))
    out = run_spmd(P, lambda c: gather(distribute(X, 3, c)))
    assert all(np.array_equal(g, X) for g in out.results)
    assert out.stats.by_label["gather"] == 1


def test_block_width_must_divide(rng):
    with pytest.raises(ValueError):
        distribute(rng.standard_normal((5, 4)), 3, SerialComm())


def test_wrong_shard_rows(rng):
    with pytest.raises(ValueError):
        DistBlockMatrix(np.zeros((2, 2)), 5, 1, SerialComm())


def test_block_accessors(rng):
    X = rng.standard_normal((8, 6))
    D = distribute(X, 2, SerialComm())
    assert np.array_equal(D.block(2), X[:, 2:4])
    assert np.array_equal(D.blocks(1, 2), X[:, :4])
    assert D.blocks(1, 0).shape == (8, 0)


def test_fused_gram_orthonormal(rng):
    Q, _ = householder_qr(rng.standard_normal((50, 4)))
    G = fused_gram([Q], [Q], SerialComm(), "orth")
    assert np.max(np.abs(G - np.eye(4))) <= 10 * U


@pytest.mark.parametrize("P", [2, 3, 8])
def test_fused_gram_bitwise_across_p(rng, P):
    X = rng.standard_normal((37, 6))
    ref = gram(X[:, :4], X[:, 2:])
    out = run_spmd(P, lambda c: fused_gram([distribute(X, 2, c).local[:, :4]],
                                           [distribute(X, 2, c).local[:, 2:]], c, "x"))
    assert all(np.array_equal(r, ref) for r in out.results)


def test_fused_gram_words_and_single_sync(rng):
    n, s, k = 40, 3, 2
    Qk = rng.standard_normal((n, k * s))
    Uk = rng.standard_normal((n, s))
    Xn = rng.standard_normal((n, s))
    c = SerialComm()
    G = fused_gram([Qk, Uk, Xn], [Uk, Xn], c, "sync")
    assert G.shape == (k * s + 2 * s, 2 * s)
    assert c.stats.sync_count == 1
    assert c.stats.words_reduced == (k * s + 2 * s) * (2 * s)
    assert c.stats.by_label["gram:sync"] == 1


def test_fused_gram_row_mismatch():
    with pytest.raises(ValueError):
        fused_gram([np.ones((3, 1))], [np.ones((4, 1))], SerialComm(), "bad")


def test_axpy_zero_is_noop(rng):
    Y = rng.standard_normal((9, 2))
    before = Y.copy()
    local_axpy_block(Y, rng.standard_normal((9, 3)), np.zeros((3, 2)))
    assert np.array_equal(Y, before)


def test_axpy_projection_oracle():
    X = geometric(80, 6, 1e3, seed=5)
    Q, _ = householder_qr(X[:, :4])
    Y = X[:, 4:].copy()
    c = SerialComm()
    S = fused_gram([Q], [Y], c, "proj")
    local_axpy_block(Y, Q, S)
    assert np.linalg.norm(Q.T @ Y) <= 100 * U * 1e3 * np.linalg.norm(X)
    assert c.stats.sync_count == 1


def test_axpy_shape_check(rng):
    with pytest.raises(ValueError):
        local_axpy_block(np.zeros((4, 2)), np.zeros((4, 3)), np.zeros((2, 2)))


def test_scale_identity_and_round_trip(rng):
    Uu = rng.standard_normal((30, 3))
    W = Uu.copy()
    scale_right_block(W, np.eye(3))
    assert np.array_equal(W, Uu)
    G = np.triu(rng.standard_normal((3, 3))) + 3 * np.eye(3)
    W = Uu @ G
    scale_right_block(W, G)
    assert np.linalg.norm(W - Uu) <= 10 * U * np.linalg.cond(G) * np.linalg.norm(Uu)


def test_replicated_digest_agrees_on_ranks(rng):
    M = rng.standard_normal((3, 3))
    out = run_spmd(4, lambda c: replicated_digest(c.allreduce_sum(M * (c.rank == 0), "r")))
    assert len(set(out.results)) == 1


@pytest.mark.parametrize("variant", list(Variant))
def test_only_gram_and_tree_communicate(variant):
    X = geometric(64, 16, 1e2, seed=7)

    def body(c):
        return factorize(variant, distribute(X, 4, c)).stats

    stats = run_spmd(3, body).results[0]
    assert stats.sync_count == stats.count("gram:") + stats.count("tree:")
    assert stats.sync_count == variant.expected_syncs(4)
