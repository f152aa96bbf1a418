"""The BCGS family over a distributed block matrix.

Each routine is SPMD code: call it on every rank with that rank's
``DistBlockMatrix``.  Block indices are 1-based to match X_1 .. X_q.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .comm import SyncStats, run_spmd
from .dense import NotSPDError, UpperTriangular, as_matrix, tri_solve_left_transpose
from .distblock import DistBlockMatrix, distribute, fused_gram, gather, local_axpy_block, \
    scale_right_block
from .intraorth import IntraorthKind, cholqr, pyth_chol, tsqr


@dataclass(frozen=True)
class VariantInfo:
    label: str
    syncs_per_block: int      # leading coefficient of the sync count
    sync_offset: int          # expected_syncs(q) = syncs_per_block * q + sync_offset
    loo: str                  # "O(u)", "O(u)k^2" or "unstable"
    assumption_power: int     # kappa exponent in O(u) kappa^p <= 1; 0 means no guarantee
    low_sync: bool


class Variant(enum.Enum):
    BCGS = VariantInfo("BCGS", 2, -1, "unstable", 0, False)
    BCGSI_PLUS = VariantInfo("BCGSI+", 4, -3, "O(u)", 1, False)
    BCGSPIPI_PLUS = VariantInfo("BCGSPIPI+", 2, -1, "O(u)", 2, True)
    BCGSI_P_1S = VariantInfo("BCGSI+P-1S", 1, 0, "O(u)", 2, True)
    BCGSI_P_2S = VariantInfo("BCGSI+P-2S", 2, -1, "O(u)", 1, True)
    BCGSI_1S = VariantInfo("BCGSI+1S", 1, 0, "O(u)k^2", 3, True)

    @property
    def label(self) -> str:
        return self.value.label

    def expected_syncs(self, q: int) -> int:
        if q == 1:
            return 1
        return self.value.syncs_per_block * q + self.value.sync_offset

    @property
    def assumption(self) -> str:
        p = self.value.assumption_power
        if p == 0:
            return "none"
        return "O(u)kappa(X) <= 1" if p == 1 else f"O(u)kappa^{p}(X) <= 1"

    @classmethod
    def parse(cls, name) -> "Variant":
        if isinstance(name, Variant):
            return name
        key = str(name).strip().upper().replace("_", "-")
        for v in cls:
            if v.label.upper() == key or v.name == str(name).strip().upper():
                return v
        if key in ("CGSI+", "CGS2"):
            return cls.BCGSI_PLUS
        raise ValueError(f"unknown variant {name!r}; expected one of "
                         f"{', '.join(v.label for v in cls)}")


@dataclass
class BcgsResult:
    Q: DistBlockMatrix
    R: UpperTriangular
    stats: SyncStats
    variant: Variant
    trace: list = field(default_factory=list)


def _chol(variant: Variant, T, S, site: str, block: int) -> np.ndarray:
    try:
        return pyth_chol(T, S)
    except NotSPDError as exc:
        raise NotSPDError(exc.pivot, site=f"{variant.label} {site}", block=block,
                          assumption=variant.assumption) from None


class _Run:
    """Shared state of one factorization on one rank."""

    def __init__(self, X: DistBlockMatrix, variant: Variant):
        self.X = X
        self.variant = variant
        self.comm = X.comm
        self.n, self.s, self.q = X.n, X.s, X.q
        if self.q < 1:
            raise ValueError("need at least one block column")
        if self.n < self.q * self.s:
            raise ValueError(f"need n >= q*s, got n={self.n}, q*s={self.q * self.s}")
        self.Q = DistBlockMatrix.zeros_like(X)
        self.R = np.zeros((self.q * self.s, self.q * self.s))
        self.before = self.comm.stats.copy()
        self.trace: list = []

    def Qk(self, k: int) -> np.ndarray:
        return self.Q.blocks(1, k)

    def set_r(self, k: int, col, diag) -> None:
        """R_{1:k,k+1} = col, R_{k+1,k+1} = diag."""
        s = self.s
        self.R[:k * s, k * s:(k + 1) * s] = col
        self.R[k * s:(k + 1) * s, k * s:(k + 1) * s] = diag

    def first_block(self, label="tsqr") -> None:
        Q1, R11 = tsqr(self.X.block(1), self.comm, self.n, label)
        self.Q.block(1)[...] = Q1
        self.R[:self.s, :self.s] = R11

    def result(self) -> BcgsResult:
        stats = self.comm.stats.since(self.before)
        return BcgsResult(self.Q, UpperTriangular(self.R, self.s), stats, self.variant, self.trace)


def _project(Qk: np.ndarray, B: np.ndarray, S) -> np.ndarray:
    W = np.array(B, copy=True)
    local_axpy_block(W, Qk, S)
    return W


def bcgs_classic(X: DistBlockMatrix, intra: IntraorthKind = IntraorthKind.TSQR) -> BcgsResult:
    """Plain BCGS: one projection sync and one intraorthogonalization per block."""
    run = _Run(X, Variant.BCGS)
    comm, n, s = run.comm, run.n, run.s

    def orth(B, k):
        if intra is IntraorthKind.TSQR:
            return tsqr(B, comm, n)
        try:
            return cholqr(B, comm)
        except NotSPDError as exc:
            raise NotSPDError(exc.pivot, site="BCGS CholQR", block=k,
                              assumption="O(u)kappa^2(X) <= 1") from None

    Q1, R11 = orth(X.block(1), 1)
    run.Q.block(1)[...] = Q1
    run.R[:s, :s] = R11
    for k in range(1, run.q):
        Qk = run.Qk(k)
        S = fused_gram([Qk], [X.block(k + 1)], comm, "project")
        Qn, Rkk = orth(_project(Qk, X.block(k + 1), S), k + 1)
        run.Q.block(k + 1)[...] = Qn
        run.set_r(k, S, Rkk)
    return run.result()


def bcgs_iro(X: DistBlockMatrix) -> BcgsResult:
    """BCGSI+: project and TSQR twice per block column."""
    run = _Run(X, Variant.BCGSI_PLUS)
    comm, n = run.comm, run.n
    run.first_block()
    for k in range(1, run.q):
        Qk = run.Qk(k)
        S1 = fused_gram([Qk], [X.block(k + 1)], comm, "project-1")
        U, T1 = tsqr(_project(Qk, X.block(k + 1), S1), comm, n, "tsqr-1")
        S2 = fused_gram([Qk], [U], comm, "project-2")
        Qn, T2 = tsqr(_project(Qk, U, S2), comm, n, "tsqr-2")
        run.Q.block(k + 1)[...] = Qn
        run.set_r(k, S1 + S2 @ T1, T2 @ T1)
    return run.result()


def bcgs_pipi_plus(X: DistBlockMatrix) -> BcgsResult:
    """BCGSPIPI+: two Pythagorean passes, two syncs per block column."""
    v = Variant.BCGSPIPI_PLUS
    run = _Run(X, v)
    comm, s = run.comm, run.s
    run.first_block()
    for k in range(1, run.q):
        Qk = run.Qk(k)
        Xn = X.block(k + 1)
        ks = k * s
        G = fused_gram([Qk, Xn], [Xn], comm, "first")
        S, T = G[:ks], G[ks:]
        Skk = _chol(v, T, S, "line 4", k + 1)
        U = _project(Qk, Xn, S)
        scale_right_block(U, Skk)
        G2 = fused_gram([Qk, U], [U], comm, "second")
        Y, Om = G2[:ks], G2[ks:]
        Ykk = _chol(v, Om, Y, "line 7", k + 1)
        Qn = _project(Qk, U, Y)
        scale_right_block(Qn, Ykk)
        run.Q.block(k + 1)[...] = Qn
        run.set_r(k, S + Y @ Skk, Ykk @ Skk)
        run.trace.append({"block": k + 1, "S": S.copy(), "recurrence": False})
    return run.result()


def _delayed(X: DistBlockMatrix, variant: Variant) -> BcgsResult:
    """One-sync skeleton shared by BCGSI+P-1S, BCGSI+P-2S and BCGSI+1S.

    The first intraorthogonalization of X_{k+1} is a Pythagorean Cholesky
    (P-1S), a TSQR (P-2S) or skipped (1S); the projection coefficients come
    from the delayed-normalization recurrence.
    """
    run = _Run(X, variant)
    comm, n, s, q = run.comm, run.n, run.s, run.q
    if q == 1:
        run.first_block()
        return run.result()
    fuse_t = variant is Variant.BCGSI_P_1S

    # Q_1, R_11 and S_12 = Q_1^T X_2 from one TSQR of [X_1 X_2]
    J, RJ = tsqr(X.blocks(1, 2), comm, n, "tsqr-first")
    run.Q.block(1)[...] = J[:, :s]
    run.R[:s, :s] = RJ[:s, :s]
    S = RJ[:s, s:]
    run.trace.append({"block": 2, "S": S.copy(), "recurrence": False})
    U, Skk = _first_intra(variant, run, 1, S, RJ[s:, s:])

    Yc = Ykk = Z = P = T = None
    for k in range(1, q):
        Qk = run.Qk(k)
        ks = k * s
        if k >= 2:
            S = np.vstack([Z, tri_solve_left_transpose(Ykk, P - Yc.T @ Z)])
            run.trace.append({"block": k + 1, "S": S.copy(), "recurrence": True})
            U, Skk = _first_intra(variant, run, k, S, T)
        if k < q - 1:
            Xnext = X.block(k + 2)
            left = [Qk, U, Xnext] if fuse_t else [Qk, U]
            G = fused_gram(left, [U, Xnext], comm, "sync")
            Yc, Z = G[:ks, :s], G[:ks, s:]
            Om, P = G[ks:ks + s, :s], G[ks:ks + s, s:]
            if fuse_t:
                T = G[ks + s:, s:]
        else:
            G = fused_gram([Qk, U], [U], comm, "sync")
            Yc, Om = G[:ks], G[ks:]
        Ykk = _chol(variant, Om, Yc, "line 9", k + 1)
        Qn = _project(Qk, U, Yc)
        scale_right_block(Qn, Ykk)
        run.Q.block(k + 1)[...] = Qn
        if Skk is None:
            run.set_r(k, S + Yc, Ykk)
        else:
            run.set_r(k, S + Yc @ Skk, Ykk @ Skk)
    return run.result()


def _first_intra(variant: Variant, run: _Run, k: int, S, extra):
    """U_{k+1} and S_{k+1,k+1} from X_{k+1} - Q_k S.

    ``extra`` is R_22 of the joint TSQR in the prologue (k = 1) or the fused
    T_{k+1} = X_{k+1}^T X_{k+1} inside the loop (P-1S only).
    """
    U = _project(run.Qk(k), run.X.block(k + 1), S)
    if variant is Variant.BCGSI_1S:
        return U, None
    if variant is Variant.BCGSI_P_2S:
        return tsqr(U, run.comm, run.n, "tsqr-intra")
    Skk = extra if k == 1 else _chol(variant, extra, S, "line 4", k + 1)
    scale_right_block(U, Skk)
    return U, Skk


def bcgs_ip_1s(X: DistBlockMatrix) -> BcgsResult:
    return _delayed(X, Variant.BCGSI_P_1S)


def bcgs_ip_2s(X: DistBlockMatrix) -> BcgsResult:
    return _delayed(X, Variant.BCGSI_P_2S)


def bcgs_i_1s(X: DistBlockMatrix) -> BcgsResult:
    return _delayed(X, Variant.BCGSI_1S)


_DISPATCH = {
    Variant.BCGS: bcgs_classic,
    Variant.BCGSI_PLUS: bcgs_iro,
    Variant.BCGSPIPI_PLUS: bcgs_pipi_plus,
    Variant.BCGSI_P_1S: bcgs_ip_1s,
    Variant.BCGSI_P_2S: bcgs_ip_2s,
    Variant.BCGSI_1S: bcgs_i_1s,
}


def factorize(variant, X: DistBlockMatrix, **kwargs) -> BcgsResult:
    return _DISPATCH[Variant.parse(variant)](X, **kwargs)


@dataclass
class DenseResult:
    Q: np.ndarray
    R: np.ndarray
    stats: SyncStats
    trace: list


def factor_dense(X, s: int, variant, nprocs: int = 1, **kwargs) -> DenseResult:
    """Distribute X over ``nprocs`` simulated ranks, factor it and gather Q.

    ``stats`` covers the algorithm only (the final gather is excluded).
    """
    X = as_matrix(X)
    variant = Variant.parse(variant)

    def body(comm):
        res = factorize(variant, distribute(X, s, comm), **kwargs)
        return gather(res.Q), res.R.data, res.stats, res.trace

    out = run_spmd(nprocs, body)
    Q, R, stats, trace = out.results[0]
    return DenseResult(Q, R, stats, trace)
