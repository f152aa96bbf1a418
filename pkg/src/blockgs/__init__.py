"""Block classical Gram-Schmidt QR with low-synchronization variants,
run over a simulated row-distributed SPMD communicator."""
from .comm import CollectiveError, DeadlockError, SerialComm, SyncStats, run_spmd
from .dense import NotSPDError, RankDeficientError, SingularError, UpperTriangular, chol_factor, \
    gram, householder_qr, tri_solve_right, two_norm
from .distblock import DistBlockMatrix, distribute, fused_gram, gather
from .harness import CostModel, MatrixSpec, RunCost, gen_matrix, log_slope, \
    loss_of_orthogonality, predict_speedup, residual, variant_flops
from .intraorth import IntraorthKind, cholqr, pyth_chol, tsqr
from .variants import Variant, factor_dense, factorize

__all__ = [
    "CollectiveError", "DeadlockError", "SerialComm", "SyncStats", "run_spmd",
    "NotSPDError", "RankDeficientError", "SingularError", "UpperTriangular", "chol_factor",
    "gram", "householder_qr", "tri_solve_right", "two_norm",
    "DistBlockMatrix", "distribute", "fused_gram", "gather",
    "CostModel", "MatrixSpec", "RunCost", "gen_matrix", "log_slope", "loss_of_orthogonality",
    "predict_speedup", "residual", "variant_flops",
    "IntraorthKind", "cholqr", "pyth_chol", "tsqr",
    "Variant", "factor_dense", "factorize",
]
