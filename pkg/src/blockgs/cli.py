"""Command-line entry point: ``blockgs bench | factor | verify``."""
from __future__ import annotations

import argparse
import sys

from .harness import DISTRIBUTIONS, BenchReport, ConfigError, CostModel, MatrixSpec, RunCost, \
    bench, parse_config, predict_speedup, probe_cost, run_cell, variant_flops
from .variants import Variant


def _cost_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--cost-alpha", type=float, help="seconds per synchronization")
    p.add_argument("--cost-beta", type=float, help="seconds per word reduced")
    p.add_argument("--cost-gamma", type=float, help="seconds per flop per process")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockgs",
                                     description="Block Gram-Schmidt QR variants and cost model")
    sub = parser.add_subparsers(dest="command", required=True)
    cost = _cost_parent()

    b = sub.add_parser("bench", parents=[cost], help="run a configured sweep")
    b.add_argument("--config", required=True, help="key = value config file")
    b.add_argument("--format", choices=("csv", "json"), default="csv")
    b.add_argument("--output", help="write here instead of the config's 'out' or stdout")

    f = sub.add_parser("factor", parents=[cost], help="factor one generated matrix")
    f.add_argument("--variant", required=True)
    f.add_argument("--n", type=int, required=True)
    f.add_argument("--m", type=int, required=True)
    f.add_argument("--s", type=int, required=True)
    f.add_argument("--kappa", type=float, default=1.0)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--procs", type=int, default=1)
    f.add_argument("--distribution", choices=DISTRIBUTIONS, default="geometric")
    f.add_argument("--out", choices=("csv", "json"), default="csv")

    sub.add_parser("verify", parents=[cost], help="run the invariant checks")
    return parser


def _model(args, P: int, alpha, beta, gamma) -> CostModel:
    return CostModel(alpha if args.cost_alpha is None else args.cost_alpha,
                     beta if args.cost_beta is None else args.cost_beta,
                     gamma if args.cost_gamma is None else args.cost_gamma, P)


def _write(text: str, path: str | None) -> None:
    if path:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _bench(args) -> int:
    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg = parse_config(fh.read())
    except (OSError, ConfigError) as exc:
        print(f"blockgs bench: config error: {exc}", file=sys.stderr)
        return 2
    for key in ("alpha", "beta", "gamma"):
        override = getattr(args, f"cost_{key}")
        if override is not None:
            cfg[key] = override
    try:
        report = bench(cfg)
    except ValueError as exc:
        print(f"blockgs bench: config error: {exc}", file=sys.stderr)
        return 2
    for row in report.rows:
        if row.status != "ok":
            print(f"blockgs bench: {row.status}: {row.variant.label} n={row.n} m={row.m} "
                  f"s={row.s} P={row.P} kappa={row.kappa:g}: {row.message}", file=sys.stderr)
    _write(report.to_json() if args.format == "json" else report.to_csv(),
           args.output or cfg["out"])
    return report.exit_code


def _factor(args) -> int:
    try:
        v = Variant.parse(args.variant)
        spec = MatrixSpec(args.n, args.m, args.s, args.kappa, args.seed, args.distribution)
        if args.n < args.m or args.procs < 1:
            raise ValueError("need n >= m and procs >= 1")
        model = _model(args, args.procs, CostModel.alpha, CostModel.beta, CostModel.gamma)
    except ValueError as exc:
        print(f"blockgs factor: {exc}", file=sys.stderr)
        return 2
    row = run_cell(v, spec, args.procs, seeds=1, model=model)
    base = probe_cost(Variant.BCGSI_PLUS, args.m, args.s)
    base = RunCost(base.sync_count, base.words_reduced,
                   variant_flops(Variant.BCGSI_PLUS, args.n, args.m, args.s))
    row.speedup = predict_speedup(model, row.cost, base)
    report = BenchReport([row])
    if row.status != "ok":
        print(f"blockgs factor: {row.status}: {row.message}", file=sys.stderr)
    _write(report.to_json() if args.out == "json" else report.to_csv(), None)
    return 1 if row.status != "ok" else 0


def _verify(args) -> int:
    from .verify import run_checks
    return 0 if run_checks() else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"bench": _bench, "factor": _factor, "verify": _verify}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
