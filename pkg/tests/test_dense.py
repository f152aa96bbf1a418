import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from blockgs.dense import (
    GramAccumulator, NotSPDError, SingularError, UpperTriangular, chol_factor, condition_number,
    gram, householder_qr, matmul_rows, tri_solve_left_transpose, tri_solve_right, two_norm,
)
from conftest import U, geometric


def fsum_gram(A, B):
    """Triple loop with a correctly rounded inner sum."""
    out = np.empty((A.shape[1], B.shape[1]))
    for i in range(A.shape[1]):
        for j in range(B.shape[1]):
            out[i, j] = math.fsum(A[k, i] * B[k, j] for k in range(A.shape[0]))
    return out


def jacobi_sigma_max(A, sweeps=60):
    """One-sided Jacobi SVD; returns the largest singular value."""
    W = np.array(A, dtype=float, copy=True)
    n = W.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                a = W[:, p] @ W[:, p]
                b = W[:, q] @ W[:, q]
                c = W[:, p] @ W[:, q]
                if c == 0.0:
                    continue
                off = max(off, abs(c) / math.sqrt(a * b))
                zeta = (b - a) / (2 * c)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1 + zeta * zeta))
                cs = 1 / math.sqrt(1 + t * t)
                sn = cs * t
                wp = W[:, p].copy()
                W[:, p] = cs * wp - sn * W[:, q]
                W[:, q] = sn * wp + cs * W[:, q]
        if off < 1e-15:
            break
    return float(np.max(np.linalg.norm(W, axis=0)))


class TestGram:
    def test_identity_left(self, rng):
        M = rng.standard_normal((3, 2))
        assert np.array_equal(gram(np.eye(3), M), M)

    def test_small_exact(self):
        a = np.array([[1.0], [2.0], [2.0]])
        assert np.array_equal(gram(a, a), [[9.0]])

    @pytest.mark.parametrize("shape", [(20, 3), (1, 1), (257, 4)])
    def test_matches_fsum_oracle(self, rng, shape):
        A = rng.standard_normal(shape)
        B = rng.standard_normal((shape[0], 2)) * 1e3
        assert np.array_equal(gram(A, B), fsum_gram(A, B))

    def test_cancellation_is_exact(self):
        A = np.array([[1e16], [1.0], [-1e16]])
        B = np.ones((3, 1))
        assert gram(A, B)[0, 0] == 1.0

    def test_aliased_is_symmetric(self, rng):
        A = rng.standard_normal((500, 6))
        G = gram(A, A)
        assert np.array_equal(G, G.T)

    def test_row_mismatch(self):
        with pytest.raises(ValueError):
            gram(np.ones((3, 2)), np.ones((4, 2)))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (12, 2), elements=st.floats(-1e6, 1e6)),
           st.integers(1, 11))
    def test_split_merge_invariant(self, A, cut):
        whole = gram(A, A)
        parts = GramAccumulator.from_products(A[:cut], A[:cut]).merge(
            GramAccumulator.from_products(A[cut:], A[cut:]))
        assert np.array_equal(parts.value(), whole)


class TestChol:
    def test_identity(self):
        assert np.array_equal(chol_factor(np.eye(4)), np.eye(4))

    def test_two_by_two(self):
        A = np.array([[4.0, 2.0], [2.0, 3.0]])
        G = chol_factor(A)
        assert np.all(np.diag(G) > 0)
        assert np.max(np.abs(G.T @ G - A)) <= 4 * U * 4

    def test_indefinite_pivot(self):
        with pytest.raises(NotSPDError) as info:
            chol_factor(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert info.value.pivot == 2

    @pytest.mark.parametrize("seed", range(4))
    def test_round_trip(self, seed):
        M = np.random.default_rng(seed).standard_normal((30, 8))
        A = M.T @ M + 1e-3 * np.eye(8)
        G = chol_factor(A)
        assert np.allclose(np.tril(G, -1), 0)
        assert np.linalg.norm(G.T @ G - A) <= 10 * U * np.linalg.norm(A)

    def test_symmetrizes_input(self):
        A = np.array([[2.0, 1.0 + 1e-17], [1.0, 2.0]])
        G = chol_factor(A)
        assert np.allclose(G.T @ G, [[2, 1], [1, 2]], atol=1e-15)


class TestTriSolve:
    def test_identity(self, rng):
        B = rng.standard_normal((5, 3))
        assert np.array_equal(tri_solve_right(B, np.eye(3)), B)

    def test_worked_example(self):
        W = tri_solve_right(np.array([[2.0, 4.0], [0.0, 6.0]]), np.array([[2.0, 1.0], [0.0, 3.0]]))
        assert np.array_equal(W, [[1.0, 1.0], [0.0, 2.0]])

    def test_zero_diagonal(self):
        with pytest.raises(SingularError):
            tri_solve_right(np.ones((2, 2)), np.array([[1.0, 1.0], [0.0, 0.0]]))

    @pytest.mark.parametrize("cond", [1e1, 1e4, 1e8])
    def test_multiply_back(self, rng, cond):
        G = np.triu(rng.standard_normal((6, 6)))
        np.fill_diagonal(G, np.logspace(0, -np.log10(cond), 6))
        B = rng.standard_normal((40, 6))
        W = tri_solve_right(B, G)
        kG = np.linalg.cond(G)
        assert np.linalg.norm(W @ G - B) <= 10 * U * kG * np.linalg.norm(B)

    def test_left_transpose(self, rng):
        G = np.triu(rng.standard_normal((4, 4))) + 4 * np.eye(4)
        B = rng.standard_normal((4, 3))
        assert np.allclose(G.T @ tri_solve_left_transpose(G, B), B, atol=1e-13)


class TestHouseholder:
    def test_orthonormal_input(self, rng):
        X, _ = np.linalg.qr(rng.standard_normal((10, 3)))
        Q, R = householder_qr(X)
        assert np.allclose(np.abs(Q), np.abs(X), atol=1e-14)
        assert np.allclose(R, np.eye(3), atol=1e-14)

    def test_three_four_five(self):
        Q, R = householder_qr(np.array([[3.0], [4.0]]))
        assert np.allclose(Q, [[0.6], [0.8]], atol=1e-16)
        assert np.allclose(R, [[5.0]], atol=4e-15)

    @pytest.mark.parametrize("kappa", [1.0, 1e4, 1e8, 1e12, 1e15])
    def test_stable_for_any_kappa(self, kappa):
        X = geometric(50, 5, kappa, seed=3)
        Q, R = householder_qr(X)
        assert np.linalg.norm(Q.T @ Q - np.eye(5), 2) <= 50 * U * 5
        assert np.linalg.norm(X - Q @ R) <= 50 * U * np.linalg.norm(X)
        assert np.all(np.diag(R) >= 0)
        if kappa == 1e12:
            assert np.linalg.norm(Q.T @ Q - np.eye(5), 2) < 1e-14

    def test_wide_rejected(self):
        with pytest.raises(ValueError):
            householder_qr(np.ones((2, 3)))


class TestTwoNorm:
    def test_identity(self):
        assert two_norm(np.eye(3)) == pytest.approx(1.0, rel=1e-12)

    def test_diag(self):
        assert two_norm(np.diag([3.0, 1.0])) == pytest.approx(3.0, rel=1e-10)

    def test_zero(self):
        assert two_norm(np.zeros((3, 2))) == 0.0

    @pytest.mark.parametrize("seed", range(3))
    def test_jacobi_oracle(self, seed):
        A = np.random.default_rng(seed).standard_normal((10, 4))
        assert two_norm(A) == pytest.approx(jacobi_sigma_max(A), rel=1e-8)

    def test_condition_number(self):
        X = geometric(60, 6, 1e6, seed=1)
        assert condition_number(X) == pytest.approx(1e6, rel=1e-6)


class TestMatmulRows:
    def test_rows_independent(self, rng):
        A = rng.standard_normal((9, 4))
        B = rng.standard_normal((4, 3))
        full = matmul_rows(A, B)
        assert np.array_equal(full[3:5], matmul_rows(A[3:5], B))
        assert np.allclose(full, A @ B, atol=1e-14)


class TestUpperTriangular:
    def test_zeroes_lower_part(self, rng):
        R = UpperTriangular(rng.standard_normal((4, 4)), s=2)
        assert np.all(np.tril(R.data, -1) == 0.0)
        assert R.q == 2 and R.dim == 4

    def test_block_indexing(self):
        R = UpperTriangular(np.arange(16.0).reshape(4, 4), s=2)
        assert np.array_equal(R.block(1, 2), [[2.0, 3.0], [6.0, 7.0]])

    def test_read_only(self):
        R = UpperTriangular(np.eye(2))
        with pytest.raises(ValueError):
            R.data[0, 1] = 1.0

    def test_bad_block_width(self):
        with pytest.raises(ValueError):
            UpperTriangular(np.eye(3), s=2)
