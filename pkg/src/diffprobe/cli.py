"""Command-line interface.

Exit codes: 0 success, 1 user or configuration error, 2 internal error.
The workspace root is taken from ``$DIFFPROBE_WORKSPACE`` (default ``./workspace``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .commands import COMMANDS
from .config import load_config
from .errors import (CorruptCacheError, DiffProbeError, InvalidConfigError, InvalidInputError,
                     ProvenanceError)
from .report import cmd_report
from .runs import RunLockedError, workspace_root

log = logging.getLogger("diffprobe")

USER_ERRORS = (InvalidConfigError, InvalidInputError, ProvenanceError, CorruptCacheError,
               RunLockedError, FileNotFoundError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffprobe",
                                     description="Diffusion-backbone feature probing experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run {name}")
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--deterministic", action="store_true",
                       help="force deterministic torch kernels")
        p.add_argument("--resume", action="store_true",
                       help="continue an interrupted run in its run directory")
    p = sub.add_parser("report", help="summarise finished runs into a markdown report")
    p.add_argument("directory", nargs="?", type=Path,
                   help="directory to scan (default: the workspace root)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            root = args.directory or workspace_root()
            if not root.is_dir():
                raise InvalidConfigError(f"report directory {root} does not exist")
            _, out = cmd_report(root)
            print(out / "report.md")
            return 0
        cfg = load_config(args.command, args.config, {"seed": args.seed})
        manifest, run_dir = COMMANDS[args.command](cfg, workspace_root(),
                                                   deterministic=args.deterministic,
                                                   resume=args.resume)
        print(run_dir)
        print(json.dumps(manifest.metrics, indent=2, default=str)[:4000])
        return 0
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DiffProbeError, Exception) as exc:  # noqa: BLE001 - report, then exit 2
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
