"""Command line: one subcommand per stage, ``run`` for the configured
sequence and ``init-config`` for a demo configuration."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import DEMO_CONFIG, STAGES, load_config
from .errors import JobValuesError
from .pipeline import run_pipeline


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jobvalues", description="Employer values from worker flows and job ads.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run",) + STAGES:
        sp = sub.add_parser(name, help="run the configured stages" if name == "run" else f"run the {name} stage")
        sp.add_argument("--config", required=True, type=Path, help="YAML run configuration")
        sp.add_argument("--output-dir", type=Path, help="override paths.output_dir")
    ic = sub.add_parser("init-config", help="write a demo configuration")
    ic.add_argument("path", type=Path)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "init-config":
        if args.path.exists():
            print(f"error: {args.path} exists", file=sys.stderr)
            return 3
        args.path.write_text(DEMO_CONFIG, encoding="utf-8")
        return 0
    try:
        cfg = load_config(args.config)
        if args.output_dir is not None:
            cfg = cfg.model_copy(update={"paths": cfg.paths.model_copy(update={"output_dir": args.output_dir})})
        stages = None if args.command == "run" else [args.command]
        manifest = run_pipeline(cfg, stages)
    except JobValuesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    for st in manifest["stages"]:
        print(f"{st['name']}: {len(st['outputs'])} files in {st['seconds']:.1f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
