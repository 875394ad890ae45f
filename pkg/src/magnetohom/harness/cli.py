"""Command line interface: ``magnetohom <subcommand> [--config PATH | --preset NAME]``.

Exit codes: 0 when no acceptance verdict failed, 1 when one did, 2 for an
invalid configuration (the message names the field), 3 for a numerical
failure (the message names the run id).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..errors import NumericalError, ValidationError
from .config import ConfigError, load_config
from .presets import PRESETS, preset
from .runner import COMMANDS, RunFailure, verify

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="magnetohom", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["verify"]:
        p = sub.add_parser(name)
        src = p.add_mutually_exclusive_group(required=name != "verify")
        src.add_argument("--config", type=Path, help="experiment JSON file")
        src.add_argument("--preset", choices=sorted(PRESETS), help="canonical experiment")
        p.add_argument("--out", type=Path, help="output directory (overrides the config)")
        p.add_argument("--workers", type=int, default=1, help="concurrent runs")
        if name == "verify":
            p.add_argument("--checks", help="comma separated ids, e.g. A1,A5")
    return ap


def _config(args):
    if args.config is not None:
        return load_config(args.config)
    if args.preset is not None:
        return preset(args.preset)
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError("workers", f"must be >= 1, got {args.workers}")
        cfg = _config(args)
        out = args.out if args.out is not None else Path(cfg.out if cfg is not None else "out")
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "verify":
            checks = None if not args.checks else [c.strip().upper() for c in args.checks.split(",") if c.strip()]
            rep = verify(cfg, out, args.workers, checks, echo=print)
        else:
            rep = COMMANDS[args.command](cfg, out, args.workers)
    except ValidationError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunFailure as exc:
        print(f"numerical failure in run {exc.run_id}: {exc.cause}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericalError as exc:
        print(f"numerical failure in run {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    path = out / f"{args.command}_report.json"
    rep.write_json(path)
    print(f"report: {path}")
    return EXIT_FAIL if rep.failed else EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
