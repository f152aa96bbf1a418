"""1-D rowwise distributed block matrices and fused tall-thin Gram products."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .comm import Communicator
from .dense import GramAccumulator, as_matrix, matmul_rows, tri_solve_right

GRAM_PREFIX = "gram:"
TREE_PREFIX = "tree:"
GATHER_LABEL = "gather"


def row_range(n: int, nprocs: int, rank: int) -> tuple[int, int]:
    """Rows [lo, hi) owned by ``rank`` under the ceiling split."""
    chunk = -(-n // nprocs) if n else 0
    lo = min(rank * chunk, n)
    return lo, min(lo + chunk, n)


@dataclass
class DistBlockMatrix:
    """Local shard of an n x (q*s) matrix; blocks are 1-based like X_k."""

    local: np.ndarray
    n: int
    s: int
    comm: Communicator

    def __post_init__(self):
        lo, hi = row_range(self.n, self.comm.size, self.comm.rank)
        if self.local.shape[0] != hi - lo:
            raise ValueError(f"rank {self.comm.rank} shard has {self.local.shape[0]} rows, "
                             f"expected {hi - lo}")
        if self.local.shape[1] % self.s:
            raise ValueError(f"block width {self.s} does not divide {self.local.shape[1]} columns")

    @property
    def m(self) -> int:
        return self.local.shape[1]

    @property
    def q(self) -> int:
        return self.m // self.s

    @property
    def row_start(self) -> int:
        return row_range(self.n, self.comm.size, self.comm.rank)[0]

    def block(self, k: int) -> np.ndarray:
        return self.local[:, (k - 1) * self.s:k * self.s]

    def blocks(self, i: int, j: int) -> np.ndarray:
        """Blocks i..j inclusive (empty when j < i)."""
        return self.local[:, (i - 1) * self.s:max(j, i - 1) * self.s]

    @classmethod
    def zeros_like(cls, other: "DistBlockMatrix") -> "DistBlockMatrix":
        return cls(np.zeros_like(other.local), other.n, other.s, other.comm)


def distribute(X, s: int, comm: Communicator) -> DistBlockMatrix:
    X = as_matrix(X)
    if s < 1 or X.shape[1] % s:
        raise ValueError(f"block width {s} does not divide {X.shape[1]} columns")
    lo, hi = row_range(X.shape[0], comm.size, comm.rank)
    return DistBlockMatrix(X[lo:hi].copy(), X.shape[0], s, comm)


def gather(D: DistBlockMatrix) -> np.ndarray:
    """Dense global matrix on every rank (test and I/O use; labeled 'gather')."""
    parts = D.comm.gather(D.local, GATHER_LABEL)
    return np.vstack(parts) if parts else np.zeros((0, D.m))


def _shard(x) -> np.ndarray:
    return x.local if isinstance(x, DistBlockMatrix) else as_matrix(x)


def fused_gram(left, right, comm: Communicator, label: str) -> np.ndarray:
    """[left...]^T [right...] with a single all-reduce.

    Each rank accumulates its rows exactly, so the result is bitwise
    independent of the process count.
    """
    L = [_shard(a) for a in left]
    R = [_shard(b) for b in right]
    rows = {a.shape[0] for a in L + R}
    if len(rows) > 1:
        raise ValueError(f"fused_gram: operands have different local row counts {sorted(rows)}")
    A = np.hstack(L)
    B = np.hstack(R)
    acc = GramAccumulator.from_products(A, B)
    total = comm.allreduce(acc, GramAccumulator.merge, GRAM_PREFIX + label,
                           words=A.shape[1] * B.shape[1])
    return total.value()


def local_axpy_block(Y: np.ndarray, Qs: np.ndarray, S) -> None:
    """Y <- Y - Qs S on the local shard (no communication)."""
    S = as_matrix(S)
    if Qs.shape[0] != Y.shape[0] or Qs.shape[1] != S.shape[0] or S.shape[1] != Y.shape[1]:
        raise ValueError(f"local_axpy_block: shapes {Y.shape}, {Qs.shape}, {S.shape}")
    if Qs.shape[1]:
        Y -= matmul_rows(Qs, S)


def scale_right_block(U: np.ndarray, G) -> None:
    """U <- U G^{-1} on the local shard (no communication)."""
    U[...] = tri_solve_right(U, G)


def replicated_digest(a) -> str:
    """Hash of a replicated value, for cross-rank consistency checks."""
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    return hashlib.sha256(repr(a.shape).encode() + a.tobytes()).hexdigest()


def shard_rows(n: int, nprocs: int) -> list[int]:
    return [hi - lo for lo, hi in (row_range(n, nprocs, r) for r in range(nprocs))]
