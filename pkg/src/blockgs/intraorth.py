"""Intraorthogonalization of one distributed block vector: TSQR, CholQR and
the Pythagorean Cholesky update.

TSQR runs on a fixed binary tree over *global row indices* (leaves are single
rows, rows are zero-padded up to the next power of two).  Each rank factors
the complete subtrees inside its row range; the partial forests are merged by
one tree reduction.  Because every tree node is computed from the same inputs
whatever the process count, Q and R are bitwise independent of P.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .comm import Communicator
from .dense import RankDeficientError, chol_factor, tri_solve_right
from .distblock import TREE_PREFIX, fused_gram, row_range


class IntraorthKind(enum.Enum):
    TSQR = "TSQR"
    CHOLQR = "CholQR"


def _seq_dot(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sum over axis 1 of x*y, strictly left to right."""
    acc = x[:, 0] * y[:, 0]
    for i in range(1, x.shape[1]):
        acc = acc + x[:, i] * y[:, i]
    return acc


def _bmm(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Batched A @ B with a fixed accumulation order."""
    out = A[:, :, 0, None] * B[:, None, 0, :]
    for k in range(1, A.shape[2]):
        out = out + A[:, :, k, None] * B[:, None, k, :]
    return out


def _householder_batched(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Economic Householder QR of each (m x w) matrix in a batch, m >= w.

    Only elementwise operations, so every batch member is computed the same
    way regardless of batch size.  No sign normalization.
    """
    A = np.array(A, dtype=np.float64, copy=True)
    nb, m, w = A.shape
    vs = []
    for j in range(w):
        # scale by an exact power of two so tiny columns cannot underflow v^T v
        x = A[:, j:, j]
        _, e = np.frexp(np.max(np.abs(x), axis=1))
        x = np.ldexp(x, -e[:, None])
        normx = np.sqrt(_seq_dot(x, x))
        alpha = np.where(x[:, 0] >= 0, -normx, normx)
        v = x.copy()
        v[:, 0] = x[:, 0] - alpha
        vv = _seq_dot(v, v)
        beta = np.zeros_like(vv)
        np.divide(2.0, vv, out=beta, where=vv > 0)
        sub = A[:, j:, j:]
        t = beta[:, None] * _seq_rows(v, sub)
        sub -= v[:, :, None] * t[:, None, :]
        vs.append((v, beta))
    R = np.triu(A[:, :w, :])
    Q = np.zeros((nb, m, w))
    Q[:, np.arange(w), np.arange(w)] = 1.0
    for j in reversed(range(w)):
        v, beta = vs[j]
        sub = Q[:, j:, :]
        t = beta[:, None] * _seq_rows(v, sub)
        sub -= v[:, :, None] * t[:, None, :]
    return Q, R


def _seq_rows(v: np.ndarray, M: np.ndarray) -> np.ndarray:
    """v^T M per batch member, rows accumulated in order."""
    acc = v[:, 0, None] * M[:, 0, :]
    for i in range(1, v.shape[1]):
        acc = acc + v[:, i, None] * M[:, i, :]
    return acc


def _combine_pair(top: np.ndarray, bottom: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Qn, Rn = _householder_batched(np.concatenate([top, bottom], axis=0)[None])
    return Qn[0], Rn[0]


@dataclass
class TreeForest:
    """Complete subtrees of the global row tree, keyed by (level, index)."""

    nodes: dict = field(default_factory=dict)
    factors: dict = field(default_factory=dict)

    def merge(self, other: "TreeForest") -> "TreeForest":
        nodes = {**self.nodes, **other.nodes}
        factors = {**self.factors, **other.factors}
        while True:
            pairs = sorted(key for key in nodes
                           if key[1] % 2 == 0 and (key[0], key[1] + 1) in nodes)
            if not pairs:
                break
            for h, j in pairs:
                Qn, Rn = _combine_pair(nodes.pop((h, j)), nodes.pop((h, j + 1)))
                nodes[(h + 1, j // 2)] = Rn
                factors[(h + 1, j // 2)] = Qn
        return TreeForest(nodes, factors)


def tree_height(n: int) -> int:
    return (n - 1).bit_length() if n > 1 else 0


@dataclass
class _LocalTree:
    levels: list          # per level: (lo, hi) node index range
    factors: list         # factors[h] combines level h-1 children into level h nodes
    frontier: dict        # (level, index) -> R of maximal local subtrees


def _local_tree(rows: np.ndarray, lo: int, hi: int) -> _LocalTree:
    w = rows.shape[1]
    R = np.zeros((hi - lo, w, w))
    R[:, 0, :] = rows[:hi - lo] if rows.shape[0] >= hi - lo else np.vstack(
        [rows, np.zeros((hi - lo - rows.shape[0], w))])
    levels, factors, frontier = [(lo, hi)], [None], {}
    a, b, h = lo, hi, 0
    while a < b:
        pa, pb = (a + 1) // 2, b // 2
        if pa >= pb:
            for j in range(a, b):
                frontier[(h, j)] = R[j - a]
            break
        for j in list(range(a, 2 * pa)) + list(range(2 * pb, b)):
            frontier[(h, j)] = R[j - a]
        pairs = R[2 * pa - a:2 * pb - a].reshape(pb - pa, 2 * w, w)
        Qn, R = _householder_batched(pairs)
        a, b, h = pa, pb, h + 1
        levels.append((a, b))
        factors.append(Qn)
    return _LocalTree(levels, factors, frontier)


def tsqr(local: np.ndarray, comm: Communicator, n: int, label: str = "tsqr"):
    """TSQR of an n x w block stored rowwise; returns (local Q shard, R).

    Exactly one synchronization.  R has a nonnegative diagonal.
    """
    local = np.asarray(local, dtype=np.float64)
    w = local.shape[1]
    if n < w:
        raise RankDeficientError(f"TSQR needs at least {w} rows, got n = {n}")
    H = tree_height(n)
    lo, hi = row_range(n, comm.size, comm.rank)
    if comm.rank == comm.size - 1:
        hi_ext = 1 << H
    else:
        hi_ext = hi
    tree = _local_tree(local, lo, hi_ext) if hi_ext > lo else _LocalTree([(lo, lo)], [None], {})

    forest = comm.reduce_factor_tree(TreeForest(dict(tree.frontier), {}),
                                     TreeForest.merge, TREE_PREFIX + label, words=w * w)
    R_root = forest.nodes[(H, 0)]
    signs = np.where(np.diag(R_root) < 0, -1.0, 1.0)
    R = R_root * signs[:, None]

    # top-down: C maps a node's R-space to the final Q columns
    C = {(H, 0): np.diag(signs)}
    for (h, j) in sorted(forest.factors, reverse=True):
        Qn = forest.factors[(h, j)]
        Cn = C[(h, j)][None]
        C[(h - 1, 2 * j)] = _bmm(Qn[None, :w], Cn)[0]
        C[(h - 1, 2 * j + 1)] = _bmm(Qn[None, w:], Cn)[0]

    if not tree.frontier:
        return np.zeros((0, w)), R

    top = len(tree.levels) - 1
    a, b = tree.levels[top]
    Ch = np.stack([C[(top, j)] for j in range(a, b)])
    for h in range(top - 1, -1, -1):
        ca, cb = tree.levels[h]
        Cnext = np.empty((cb - ca, w, w))
        for (fh, j) in tree.frontier:
            if fh == h:
                Cnext[j - ca] = C[(h, j)]
        Qn = tree.factors[h + 1]
        start = 2 * a - ca
        Cnext[start:start + 2 * (b - a):2] = _bmm(Qn[:, :w, :], Ch)
        Cnext[start + 1:start + 2 * (b - a):2] = _bmm(Qn[:, w:, :], Ch)
        Ch, a, b = Cnext, ca, cb
    Q = np.ascontiguousarray(Ch[:hi - lo, 0, :])
    return Q, R


def cholqr(local: np.ndarray, comm: Communicator, label: str = "cholqr"):
    """Cholesky QR: one fused Gram sync, then local Cholesky and scaling."""
    G = chol_factor(fused_gram([local], [local], comm, label))
    return tri_solve_right(local, G), G


def pyth_chol(T, S) -> np.ndarray:
    """chol(T - S^T S), the Pythagorean diagonal block; no communication."""
    T = np.asarray(T, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    return chol_factor(T - S.T @ S if S.size else T)


def intraorth(kind: IntraorthKind, local: np.ndarray, comm: Communicator, n: int,
              label: str = "intra"):
    if kind is IntraorthKind.TSQR:
        return tsqr(local, comm, n, label)
    if kind is IntraorthKind.CHOLQR:
        return cholqr(local, comm, label)
    raise ValueError(f"unknown intraorthogonalization {kind!r}")
