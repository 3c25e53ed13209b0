"""Command line: ``mmbopt run|sweep|verify``.

Exit codes: 0 success, 1 bad config or input, 2 numerical divergence (or a
failed sweep cell / verify check).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .errors import ConfigurationError
from .experiment import parse_config, run_experiment, run_sweep

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^64)")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="path to a JSON experiment config")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--seed", type=_u64, help="seed (overrides the config)")
    common.add_argument("--record-every", type=_positive, help="trace record interval (overrides the config)")
    parser = argparse.ArgumentParser(prog="mmbopt", description="multi-block min-max bilevel experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run one experiment")
    sub.add_parser("sweep", parents=[common], help="run a batch-size sweep")
    sub.add_parser("verify", help="run the built-in oracle and property checks")
    return parser


def _load(args):
    cfg = parse_config(args.config)
    changes = {}
    if args.out is not None:
        changes["out"] = args.out
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.record_every is not None:
        changes["record_every"] = args.record_every
    return dataclasses.replace(cfg, **changes) if changes else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "verify":
        from .verify import verify
        return EXIT_OK if verify() else EXIT_NUMERIC
    try:
        cfg = _load(args)
        if args.command == "run":
            summary = run_experiment(cfg)
            brief = {k: summary[k] for k in ("status", "final_stationarity", "iterations_to_threshold", "metric",
                                              "wall_ms")}
            print(json.dumps(brief))
            return EXIT_NUMERIC if summary["status"] == "diverged" else EXIT_OK
        table = run_sweep(cfg)
        for row in table:
            print(json.dumps(row))
        return EXIT_NUMERIC if any(r["status"] == "failed" for r in table) else EXIT_OK
    except (ConfigurationError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
