"""Command-line runner.

Usage: ``qhelearn <subcommand> [--config PATH] [--seed N] [--out DIR]
[--exact | --shots N]``. Flags override values from the config file.
Exit status is 0 on success, 2 on a validation error, 1 on a runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import QheError, ValidationError
from .experiments import KINDS, load_config, run_experiment

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--out", type=Path, help="output directory")
    mode = common.add_mutually_exclusive_group()
    mode.add_argument("--exact", action="store_true", help="exact expectations (shots = 0)")
    mode.add_argument("--shots", type=int, help="measurement shots per estimate")

    parser = argparse.ArgumentParser(prog="qhelearn", description="Encrypted delegated and federated learning simulator")
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        sub.add_parser(kind, parents=[common])
    return parser


def _build_config(args: argparse.Namespace) -> dict:
    data: dict = {}
    if args.config is not None:
        try:
            data = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ValidationError(f"cannot read config {args.config}: {err}") from None
        if not isinstance(data, dict):
            raise ValidationError("config must be a JSON object")
        if data.get("kind", args.kind) != args.kind:
            raise ValidationError(f"kind: config says {data['kind']!r}, subcommand is {args.kind!r}")
    data["kind"] = args.kind
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out"] = str(args.out)
    if args.exact:
        data["shots"] = 0
    elif args.shots is not None:
        data["shots"] = args.shots
    return data


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(_build_config(args))
        summary = run_experiment(cfg)
    except ValidationError as err:
        print(f"validation error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except (QheError, ArithmeticError, OSError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(summary["metrics"], indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
