"""Command line entry points: run, report, inspect-mask.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import ConfigError, RunConfig, parse_config
from .report import report
from .runner import run
from .training import DivergenceError

EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metasparse")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute one configuration over its seed list")
    run_p.add_argument("--config", required=True, help="path to a key = value config file")
    run_p.add_argument("--out", default="runs", help="root directory for run artifacts")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        run_p.add_argument(flag, dest=f"cfg_{f.name}", default=None, metavar="V",
                           help=f"override config key {f.name}")

    rep_p = sub.add_parser("report", help="aggregate run directories into tables and charts")
    rep_p.add_argument("--runs", nargs="+", required=True, help="run directories (one per config)")
    rep_p.add_argument("--out", default="report", help="output directory")

    ins_p = sub.add_parser("inspect-mask", help="print per-tensor mask statistics of a checkpoint")
    ins_p.add_argument("--checkpoint", required=True)
    return parser


def _cmd_run(args) -> int:
    overrides = {f.name: getattr(args, f"cfg_{f.name}") for f in fields(RunConfig)
                 if getattr(args, f"cfg_{f.name}") is not None}
    config = parse_config(Path(args.config).read_text(), overrides)
    summary = run(config, args.out)
    json.dump(summary, sys.stdout, indent=1, sort_keys=True)
    print()
    return 0


def _cmd_report(args) -> int:
    paths = report(args.runs, args.out)
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return 0


def _cmd_inspect_mask(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if not ckpt.masks:
        print("checkpoint carries no masks")
        return 0
    total = active = 0
    for pid in sorted(ckpt.masks):
        mask = ckpt.masks[pid]
        on = int(np.count_nonzero(mask))
        total += mask.size
        active += on
        print(f"{pid}: {on}/{mask.size} active ({100.0 * (mask.size - on) / mask.size:.2f}% masked)")
    print(f"overall: {active}/{total} active ({100.0 * (total - active) / total:.2f}% masked)")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "report":
            return _cmd_report(args)
        return _cmd_inspect_mask(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"numeric divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
