"""Test matrices, accuracy metrics, the synchronization cost model and the
benchmark driver behind ``blockgs bench``."""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .comm import SyncStats
from .dense import UNIT_ROUNDOFF, NotSPDError, as_matrix, condition_number, householder_qr, \
    two_norm
from .variants import Variant, factor_dense

DISTRIBUTIONS = ("geometric", "gaussian", "glued")


# -- test matrices -------------------------------------------------------------

@dataclass(frozen=True)
class MatrixSpec:
    """Shape, target condition number and seed of a test matrix.

    ``geometric``: singular values log-spaced from 1 down to 1/kappa with
    random singular vectors.  ``gaussian``: i.i.d. standard normal entries
    (kappa is ignored).  ``glued``: every block column X_k is itself
    geometric with condition number kappa, so the ill-conditioning sits
    inside the blocks rather than between them.
    """

    n: int
    m: int
    s: int = 1
    kappa: float = 1.0
    seed: int = 0
    distribution: str = "geometric"

    def __post_init__(self):
        if self.s < 1 or self.m < 1 or self.m % self.s:
            raise ValueError(f"m = {self.m} is not a multiple of s = {self.s}")
        if not self.kappa >= 1.0:
            raise ValueError(f"kappa must be >= 1, got {self.kappa}")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"unknown distribution {self.distribution!r}; "
                             f"expected one of {', '.join(DISTRIBUTIONS)}")

    @property
    def q(self) -> int:
        return self.m // self.s


def _geometric(rng, n: int, m: int, kappa: float) -> np.ndarray:
    U, _ = householder_qr(rng.standard_normal((n, m)))
    V, _ = householder_qr(rng.standard_normal((m, m)))
    sigma = np.logspace(0.0, -math.log10(kappa), m)
    return (U * sigma) @ V.T


def gen_matrix(spec: MatrixSpec) -> np.ndarray:
    """Deterministic test matrix for ``spec``; same spec gives the same bits."""
    if spec.n < spec.m:
        raise ValueError(f"need n >= m, got n = {spec.n}, m = {spec.m}")
    rng = np.random.default_rng(spec.seed)
    if spec.distribution == "gaussian":
        return rng.standard_normal((spec.n, spec.m))
    if spec.distribution == "glued":
        return np.hstack([_geometric(rng, spec.n, spec.s, spec.kappa) for _ in range(spec.q)])
    return _geometric(rng, spec.n, spec.m, spec.kappa)


# -- accuracy metrics ------------------------------------------------------------

def loss_of_orthogonality(Q) -> float:
    """||Q^T Q - I||_2."""
    Q = as_matrix(Q)
    return two_norm(Q.T @ Q - np.eye(Q.shape[1]))


class Residual(float):
    """A residual value; ``absolute`` is True when X = 0 made it unnormalized."""

    absolute: bool

    def __new__(cls, value: float, absolute: bool = False):
        obj = super().__new__(cls, value)
        obj.absolute = absolute
        return obj


def residual(X, Q, R) -> Residual:
    """||X - QR||_F / ||X||_F, or ||QR||_F flagged ``absolute`` when X = 0."""
    X, Q, R = as_matrix(X), as_matrix(Q), as_matrix(np.asarray(R))
    if Q.shape[0] != X.shape[0] or Q.shape[1] != R.shape[0] or R.shape[1] != X.shape[1]:
        raise ValueError(f"residual: shapes {X.shape}, {Q.shape}, {R.shape} do not conform")
    nx = np.linalg.norm(X)
    diff = np.linalg.norm(X - Q @ R)
    if nx == 0.0:
        return Residual(diff, absolute=True)
    return Residual(diff / nx)


def log_slope(kappas, values) -> float:
    """Least-squares slope of log10(values) against log10(kappas)."""
    x = np.log10(np.asarray(kappas, dtype=float))
    y = np.log10(np.asarray(values, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def assumption_holds(variant, kappa: float, constant: float = 100.0) -> bool:
    """Whether constant * u * kappa^p <= 1 for the variant's stability assumption.

    Variants without a stated assumption report False: nothing is promised.
    """
    p = Variant.parse(variant).value.assumption_power
    if p == 0:
        return False
    return constant * UNIT_ROUNDOFF * kappa ** p <= 1.0


# -- cost model --------------------------------------------------------------------

DEFAULT_ALPHA = 1e-5   # s per synchronization
DEFAULT_BETA = 1e-9    # s per word reduced
DEFAULT_GAMMA = 1e-10  # s per flop per process


@dataclass(frozen=True)
class RunCost:
    """What the cost model needs to know about one factorization."""

    sync_count: int
    words_reduced: int
    flops: float = 0.0

    @classmethod
    def from_stats(cls, stats: SyncStats, flops: float = 0.0) -> "RunCost":
        return cls(stats.sync_count, stats.words_reduced, flops)


@dataclass(frozen=True)
class CostModel:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA
    P: int = 1

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not (v >= 0.0 and math.isfinite(v)):
                raise ValueError(f"cost model {name} must be finite and nonnegative, got {v}")
        if self.P < 1:
            raise ValueError(f"cost model needs P >= 1, got {self.P}")

    def predicted_time(self, cost: RunCost) -> float:
        return (self.alpha * cost.sync_count + self.beta * cost.words_reduced
                + self.gamma * cost.flops / self.P)


def predict_speedup(model: CostModel, a: RunCost, b: RunCost) -> float:
    """How many times faster run ``a`` is than run ``b``: t(b) / t(a)."""
    ta, tb = model.predicted_time(a), model.predicted_time(b)
    if ta == 0.0 or tb == 0.0:
        raise ZeroDivisionError(f"zero predicted time (t_a = {ta}, t_b = {tb})")
    return tb / ta


def _gram(n, a, b):
    return 2 * n * a * b


def _tsqr(n, w):
    return 4 * n * w * w          # Householder factor plus forming Q


def variant_flops(variant, n: int, m: int, s: int) -> int:
    """Analytic flop count of one factorization, summed over all processes.

    Counts the O(n) terms (Gram products, block updates, triangular scalings,
    TSQR) plus the s x s Cholesky factorizations.
    """
    v = Variant.parse(variant)
    q = m // s
    chol = s ** 3 // 3
    trsm = n * s * s
    if q == 1:
        return _tsqr(n, s)
    total = 0
    if v in (Variant.BCGSI_P_1S, Variant.BCGSI_P_2S, Variant.BCGSI_1S):
        total += _tsqr(n, 2 * s)
        for k in range(1, q):
            ks = k * s
            total += 2 * n * ks * s                       # U = X - Q S
            if v is Variant.BCGSI_P_2S:
                total += _tsqr(n, s)
            elif v is Variant.BCGSI_P_1S:
                total += trsm + (chol if k >= 2 else 0)
            if k < q - 1:
                left = ks + s + (s if v is Variant.BCGSI_P_1S else 0)
                total += _gram(n, left, 2 * s)
            else:
                total += _gram(n, ks + s, s)
            total += chol + 2 * n * ks * s + trsm
        return total
    total += _tsqr(n, s)
    for k in range(1, q):
        ks = k * s
        if v is Variant.BCGS:
            total += _gram(n, ks, s) + 2 * n * ks * s + _tsqr(n, s)
        elif v is Variant.BCGSI_PLUS:
            total += 2 * (_gram(n, ks, s) + 2 * n * ks * s + _tsqr(n, s))
        else:  # BCGSPIPI+
            total += 2 * (_gram(n, ks + s, s) + chol + 2 * n * ks * s + trsm)
    return total


# -- benchmark driver -----------------------------------------------------------------

class ConfigError(ValueError):
    """Malformed benchmark configuration."""


CSV_COLUMNS = ("variant", "n", "m", "s", "q", "P", "kappa", "seed_count", "sync_count",
               "words_reduced", "flops", "loo", "residual", "predicted_time",
               "speedup_vs_bcgsi+")

_SWEEP_KEYS = {"variants": str, "n": int, "m": int, "s": int, "P": int, "kappa": float}
_SCALAR_KEYS = {"seed": int, "seeds": int, "distribution": str, "alpha": float, "beta": float,
                "gamma": float, "baseline_s": int, "numerics": bool, "out": str}
_DEFAULTS = {"variants": [v.label for v in Variant], "n": [1000], "m": [32], "s": [4],
             "P": [1], "kappa": [100.0], "seed": 0, "seeds": 3, "distribution": "geometric",
             "alpha": DEFAULT_ALPHA, "beta": DEFAULT_BETA, "gamma": DEFAULT_GAMMA,
             "baseline_s": None, "numerics": True, "out": None}


def _convert(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "yes", "1")
        if kind is int:
            return int(float(raw)) if float(raw).is_integer() else int(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def parse_config(text: str) -> dict:
    """Read the flat ``key = value`` format; comma-separated values sweep.

    Lines starting with '#' are comments.  Sweepable keys: variants, n, m, s,
    P, kappa.  Scalars: seed, seeds, distribution, alpha, beta, gamma,
    baseline_s, numerics, out.
    """
    cfg = {k: (list(v) if isinstance(v, list) else v) for k, v in _DEFAULTS.items()}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        if key in _SWEEP_KEYS:
            items = [x for x in value.split(",") if x.strip()]
            if not items:
                raise ConfigError(f"line {lineno}: {key} has no values")
            cfg[key] = [_convert(key, x, _SWEEP_KEYS[key]) for x in items]
        elif key in _SCALAR_KEYS:
            cfg[key] = _convert(key, value, _SCALAR_KEYS[key])
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    try:
        cfg["variants"] = [Variant.parse(v) for v in cfg["variants"]]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg["distribution"] not in DISTRIBUTIONS:
        raise ConfigError(f"unknown distribution {cfg['distribution']!r}")
    if cfg["seeds"] < 1:
        raise ConfigError("seeds must be >= 1")
    for key in ("alpha", "beta", "gamma"):
        if cfg[key] < 0:
            raise ConfigError(f"{key} must be nonnegative")
    for n, m, s, P in itertools.product(cfg["n"], cfg["m"], cfg["s"], cfg["P"]):
        if s < 1 or m < 1 or m % s:
            raise ConfigError(f"s = {s} does not divide m = {m}")
        if n < m:
            raise ConfigError(f"n = {n} is smaller than m = {m}")
        if P < 1:
            raise ConfigError(f"P must be >= 1, got {P}")
    if cfg["baseline_s"] is not None:
        for m in cfg["m"]:
            if m % cfg["baseline_s"]:
                raise ConfigError(f"baseline_s = {cfg['baseline_s']} does not divide m = {m}")
    return cfg


@dataclass
class BenchRow:
    variant: Variant
    n: int
    m: int
    s: int
    P: int
    kappa: float
    seed_count: int
    cost: RunCost
    loo: float
    residual: float
    predicted_time: float
    speedup: float = math.nan
    status: str = "ok"        # ok | expected-failure | unexpected-failure
    message: str = ""

    @property
    def q(self) -> int:
        return self.m // self.s

    def values(self) -> dict:
        return {"variant": self.variant.label, "n": self.n, "m": self.m, "s": self.s,
                "q": self.q, "P": self.P, "kappa": self.kappa, "seed_count": self.seed_count,
                "sync_count": self.cost.sync_count, "words_reduced": self.cost.words_reduced,
                "flops": self.cost.flops, "loo": self.loo, "residual": self.residual,
                "predicted_time": self.predicted_time, "speedup_vs_bcgsi+": self.speedup}


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.17g}"
    return str(x)


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return 1 if any(r.status == "unexpected-failure" for r in self.rows) else 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            vals = r.values()
            w.writerow([_fmt(vals[c]) for c in CSV_COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        out = []
        for r in self.rows:
            vals = {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                    for k, v in r.values().items()}
            vals.update(status=r.status, message=r.message)
            out.append(vals)
        return json.dumps(out, indent=2) + "\n"


_probe_cache: dict = {}


def probe_cost(variant, m: int, s: int) -> RunCost:
    """Sync count and words of a factorization with m columns and width s.

    Both depend only on (q, s), so a small probe with n = m rows stands in
    for any n and P.  Flops are left at zero.
    """
    v = Variant.parse(variant)
    key = (v, m, s)
    if key not in _probe_cache:
        X = gen_matrix(MatrixSpec(m, m, s, kappa=1.0, seed=0))
        _probe_cache[key] = RunCost.from_stats(factor_dense(X, s, v).stats)
    return _probe_cache[key]


def run_cell(variant, spec: MatrixSpec, P: int, seeds: int = 3, numerics: bool = True,
             model: CostModel | None = None) -> BenchRow:
    """Factor ``seeds`` matrices (seed, seed+1, ...) and average LOO and residual."""
    v = Variant.parse(variant)
    model = model or CostModel(P=P)
    flops = variant_flops(v, spec.n, spec.m, spec.s)
    loos, ress = [], []
    status, message, cost = "ok", "", None
    if numerics:
        for i in range(seeds):
            sp = MatrixSpec(spec.n, spec.m, spec.s, spec.kappa, spec.seed + i, spec.distribution)
            X = gen_matrix(sp)
            try:
                res = factor_dense(X, spec.s, v, nprocs=P)
            except NotSPDError as exc:
                kappa = condition_number(X)
                status = "unexpected-failure" if assumption_holds(v, kappa) else "expected-failure"
                message = f"seed {sp.seed}: {exc}"
                break
            cost = RunCost.from_stats(res.stats, flops)
            loos.append(loss_of_orthogonality(res.Q))
            ress.append(float(residual(X, res.Q, res.R)))
    if cost is None:
        probe = probe_cost(v, spec.m, spec.s)
        cost = RunCost(probe.sync_count, probe.words_reduced, flops)
    ok = status == "ok" and loos
    return BenchRow(v, spec.n, spec.m, spec.s, P, spec.kappa, seeds if numerics else 0, cost,
                    float(np.mean(loos)) if ok else math.nan,
                    float(np.mean(ress)) if ok else math.nan,
                    model.predicted_time(cost), status=status, message=message)


def bench(cfg: dict) -> BenchReport:
    """Run every (variant, n, m, s, P, kappa) cell of a parsed config."""
    report = BenchReport()
    baselines: dict = {}
    for n, m, s, P, kappa in itertools.product(cfg["n"], cfg["m"], cfg["s"], cfg["P"],
                                               cfg["kappa"]):
        model = CostModel(cfg["alpha"], cfg["beta"], cfg["gamma"], P)
        spec = MatrixSpec(n, m, s, kappa, cfg["seed"], cfg["distribution"])
        bs = cfg["baseline_s"] or s
        bkey = (n, m, bs, P)
        if bkey not in baselines:
            bcost = probe_cost(Variant.BCGSI_PLUS, m, bs)
            baselines[bkey] = RunCost(bcost.sync_count, bcost.words_reduced,
                                      variant_flops(Variant.BCGSI_PLUS, n, m, bs))
        for v in cfg["variants"]:
            row = run_cell(v, spec, P, cfg["seeds"], cfg["numerics"], model)
            row.speedup = predict_speedup(model, row.cost, baselines[bkey])
            report.rows.append(row)
    return report
