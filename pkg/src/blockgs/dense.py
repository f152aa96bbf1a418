"""Sequential dense kernels.

Matrices are plain 2-D ``float64`` numpy arrays.  Everything that runs on
distributed shards (``gram``, ``matmul_rows``, ``tri_solve_right``) computes
each output row or entry with a fixed sequence of scalar operations, so the
result does not depend on how many rows a shard happens to hold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

UNIT_ROUNDOFF = 2.0 ** -53


class NotSPDError(ArithmeticError):
    """Cholesky met a nonpositive pivot."""

    def __init__(self, pivot, site=None, block=None, assumption=None):
        self.pivot = pivot
        self.site = site
        self.block = block
        self.assumption = assumption
        msg = f"matrix is not numerically SPD (nonpositive pivot {pivot})"
        if site is not None:
            msg += f" at {site}"
        if block is not None:
            msg += f", block {block}"
        if assumption is not None:
            msg += f"; likely violated assumption: {assumption}"
        super().__init__(msg)


class SingularError(ArithmeticError):
    pass


class RankDeficientError(ArithmeticError):
    pass


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class UpperTriangular:
    """Upper-triangular factor with s-by-s block indexing (1-based, like R_{i,j})."""

    data: np.ndarray
    s: int = 1

    def __post_init__(self):
        a = as_matrix(self.data)
        if a.shape[0] != a.shape[1]:
            raise ValueError("UpperTriangular must be square")
        if self.s < 1 or a.shape[0] % self.s:
            raise ValueError(f"block width {self.s} does not divide {a.shape[0]}")
        a = np.triu(a)
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def q(self) -> int:
        return self.dim // self.s

    def block(self, i: int, j: int) -> np.ndarray:
        s = self.s
        return self.data[(i - 1) * s:i * s, (j - 1) * s:j * s]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


# -- exact Gram accumulation -------------------------------------------------
#
# Products fl(a*b) are split over a fixed global grid of exponent bins; within
# a bin all parts are multiples of the bin ulp and small enough that their sum
# is exact for up to 2**(53 - _BIN_WIDTH) terms.  Bin sums can therefore be
# added in any order (across rows, chunks or ranks) without rounding, and the
# final value is the correctly rounded sum of the products.

_BIN_WIDTH = 30
_TOP_ULP_EXP = 969          # extractor 1.5 * 2**(969 + 52) stays finite
_MAX_TERMS = 2 ** (53 - _BIN_WIDTH - 1)
_CHUNK_ROWS = 4096


def _bin_ulp_exp(k: int) -> int:
    return _TOP_ULP_EXP - _BIN_WIDTH * k


def _split_into_bins(x: np.ndarray) -> dict[int, np.ndarray]:
    """Exact split of ``x`` (rows x ...) into bin-wise row sums."""
    out: dict[int, np.ndarray] = {}
    amax = float(np.max(np.abs(x))) if x.size else 0.0
    if amax == 0.0:
        return out
    if not math.isfinite(amax) or amax > 2.0 ** (_TOP_ULP_EXP + _BIN_WIDTH - 1):
        raise OverflowError("gram entries out of the exactly accumulable range")
    # lowest bin whose headroom still covers every entry
    k = max(0, math.floor((_TOP_ULP_EXP + _BIN_WIDTH - 1 - math.log2(amax)) / _BIN_WIDTH))
    while k > 0 and amax > 2.0 ** (_bin_ulp_exp(k) + _BIN_WIDTH - 1):
        k -= 1
    r = x
    while True:
        e = _bin_ulp_exp(k)
        if e <= -1074:
            out[k] = r.sum(axis=0)
            return out
        m = 1.5 * 2.0 ** (e + 52)
        hi = (r + m) - m
        r = r - hi
        part = hi.sum(axis=0)
        if np.any(part):
            out[k] = part
        if not np.any(r):
            return out
        k += 1


class GramAccumulator:
    """Exact (binned) running value of A^T B, mergeable in any order."""

    def __init__(self, shape, bins=None, terms=0):
        self.shape = tuple(shape)
        self.bins: dict[int, np.ndarray] = dict(bins or {})
        self.terms = terms

    @classmethod
    def from_products(cls, A: np.ndarray, B: np.ndarray) -> "GramAccumulator":
        A = as_matrix(A)
        B = as_matrix(B)
        if A.shape[0] != B.shape[0]:
            raise ValueError(f"gram: row mismatch {A.shape[0]} vs {B.shape[0]}")
        acc = cls((A.shape[1], B.shape[1]))
        for start in range(0, A.shape[0], _CHUNK_ROWS):
            a = A[start:start + _CHUNK_ROWS]
            b = B[start:start + _CHUNK_ROWS]
            prods = a[:, :, None] * b[:, None, :]
            acc._add_bins(_split_into_bins(prods), a.shape[0])
        return acc

    def _add_bins(self, bins, terms):
        self.terms += terms
        if self.terms > _MAX_TERMS:
            raise OverflowError(f"exact gram supports at most {_MAX_TERMS} rows")
        for k, v in bins.items():
            if k in self.bins:
                self.bins[k] = self.bins[k] + v
            else:
                self.bins[k] = v.copy()

    def merge(self, other: "GramAccumulator") -> "GramAccumulator":
        if other.shape != self.shape:
            raise ValueError(f"accumulator shape mismatch {self.shape} vs {other.shape}")
        out = GramAccumulator(self.shape, {k: v.copy() for k, v in self.bins.items()}, self.terms)
        out._add_bins(other.bins, other.terms)
        return out

    def value(self) -> np.ndarray:
        res = np.zeros(self.shape)
        if not self.bins:
            return res
        keys = sorted(self.bins)
        stack = np.stack([self.bins[k] for k in keys]).reshape(len(keys), -1)
        flat = res.reshape(-1)
        for idx in range(flat.size):
            flat[idx] = math.fsum(stack[:, idx])
        return res


def gram(A, B) -> np.ndarray:
    """A^T B, correctly rounded from the exact sum of the rounded products."""
    return GramAccumulator.from_products(A, B).value()


# -- row-local products and solves ---------------------------------------------

def matmul_rows(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """A @ B with the inner dimension accumulated left to right.

    Row i of the result depends only on row i of ``A``.
    """
    A = as_matrix(A)
    B = as_matrix(B)
    if A.shape[1] != B.shape[0]:
        raise ValueError(f"matmul: inner dimension mismatch {A.shape} @ {B.shape}")
    out = np.zeros((A.shape[0], B.shape[1]))
    for k in range(A.shape[1]):
        out += A[:, k:k + 1] * B[k]
    return out


def chol_factor(A) -> np.ndarray:
    """Upper-triangular G with G^T G = (A + A^T)/2.

    Raises NotSPDError carrying the 1-based index of the first nonpositive pivot.
    """
    A = as_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"chol: matrix must be square, got {A.shape}")
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    G = np.zeros_like(A)
    for j in range(n):
        d = A[j, j] - G[:j, j] @ G[:j, j]
        if not d > 0.0:
            raise NotSPDError(j + 1)
        G[j, j] = math.sqrt(d)
        G[j, j + 1:] = (A[j, j + 1:] - G[:j, j] @ G[:j, j + 1:]) / G[j, j]
    return G


def tri_solve_right(B, G) -> np.ndarray:
    """W = B G^{-1} for upper-triangular G, by column substitution."""
    B = as_matrix(B)
    G = as_matrix(np.asarray(G))
    n = G.shape[0]
    if G.shape != (n, n) or B.shape[1] != n:
        raise ValueError(f"tri_solve_right: shapes {B.shape} and {G.shape} do not conform")
    diag = np.diag(G)
    if np.any(diag == 0.0):
        raise SingularError(f"zero diagonal entry at index {int(np.flatnonzero(diag == 0.0)[0]) + 1}")
    W = np.empty_like(B)
    for j in range(n):
        acc = B[:, j].copy()
        for i in range(j):
            acc -= W[:, i] * G[i, j]
        W[:, j] = acc / G[j, j]
    return W


def tri_solve_left_transpose(G, B) -> np.ndarray:
    """G^{-T} B without forming an inverse."""
    return tri_solve_right(as_matrix(B).T, G).T


# -- factorizations and norms ------------------------------------------------

def householder_qr(X) -> tuple[np.ndarray, np.ndarray]:
    """Economic Householder QR (LAPACK via numpy) with a nonnegative diagonal in R."""
    A = as_matrix(X)
    if A.shape[0] < A.shape[1]:
        raise ValueError(f"householder_qr needs rows >= cols, got {A.shape}")
    Q, R = np.linalg.qr(A, mode="reduced")
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    return Q * signs, np.triu(R) * signs[:, None]


def two_norm(A, rtol=1e-10, maxiter=5000) -> float:
    """Largest singular value by power iteration on A^T A."""
    A = as_matrix(A)
    if A.size == 0 or not np.any(A):
        return 0.0
    v = np.random.default_rng(0).standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(maxiter):
        w = A.T @ (A @ v)
        wn = float(np.linalg.norm(w))
        if wn == 0.0:
            return 0.0
        v = w / wn
        new = float(np.linalg.norm(A @ v))
        if abs(new - sigma) <= rtol * new:
            return new
        sigma = new
    return sigma


def condition_number(X) -> float:
    """2-norm condition number, sigma_min taken from the triangular factor."""
    _, R = householder_qr(X)
    if np.any(np.diag(R) == 0.0):
        return math.inf
    Rinv = tri_solve_right(np.eye(R.shape[0]), R)
    return two_norm(X) * two_norm(Rinv)
