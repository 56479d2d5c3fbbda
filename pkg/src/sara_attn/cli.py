"""Command line entry point: ``sara-attn {verify,bench,uptrain,demo}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, RunConfig, load_config
from . import runs

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _grid(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of lengths: {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("grid needs at least one positive length")
    return values


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=_seed)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sara-attn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("verify", parents=[common], help="estimator and construction checks (JSON report)")
    bench = sub.add_parser("bench", parents=[common], help="quadratic vs linear scaling sweep (CSV)")
    bench.add_argument("--engine", choices=["quadratic", "linear", "both"])
    bench.add_argument("--grid", type=_grid, help="comma-separated sequence lengths")
    bench.add_argument("--parallel", action="store_true", help="allow multi-threaded BLAS")
    bench.add_argument("--stabilizer", type=float, help="additive denominator stabilizer")
    sub.add_parser("uptrain", parents=[common], help="distil softmax attention into SARA (CSV + MAT1)")
    sub.add_parser("demo", parents=[common], help="synthetic navigation scene agreement (CSV + JSON)")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.command == "bench":
        if args.engine:
            cfg.bench.engine = args.engine
        if args.grid:
            cfg.bench.grid = args.grid
        if args.parallel:
            cfg.bench.parallel = True
        if args.stabilizer is not None:
            cfg.bench.stabilizer = args.stabilizer
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "verify":
        report = runs.run_verify(cfg)
        passed = report["passed"]
        for key in ("lemma1", "lemma2", "theorem1"):
            print(f"{key}: {'pass' if report[key]['passed'] else 'FAIL'}")
    elif args.command == "bench":
        records = runs.run_bench(cfg)
        for r in records:
            print(f"{r.engine:9s} N={r.N:6d} {r.wall_time_ns / 1e6:10.3f} ms  flops={r.flops}")
        print(f"crossover N: {runs.crossover(records)}")
        passed = True
    elif args.command == "uptrain":
        summary = runs.run_uptrain(cfg)
        print(f"loss {summary['initial_loss']:.6g} -> {summary['final_loss']:.6g}")
        passed = summary["passed"]
    else:
        result = runs.run_demo(cfg)
        print(json.dumps(result, indent=2, sort_keys=True))
        passed = result["passed"]
    return EXIT_OK if passed else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
