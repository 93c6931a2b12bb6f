"""Command line entry point: ``driftguard <subcommand> --config PATH [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import DriftGuardError, StageError
from .harness import Lifecycle, RunConfig, batch_runs

STAGES = ("generate", "ingest", "train", "inject", "detect", "diagnose", "plan", "retrain", "evaluate")
COMMANDS = STAGES + ("run", "batch", "show-config")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="driftguard", description="Drift lifecycle for hierarchical demand forecasts.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML run configuration (default: packaged config)")
        sp.add_argument("--seed", type=int, help="override the global seed")
        sp.add_argument("--out", help="output directory (overrides config)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "batch":
            sp.add_argument("--n-seeds", type=int, help="number of seeds (overrides config)")
    return p


def load_config(args) -> RunConfig:
    cfg = RunConfig.from_yaml(args.config) if args.config else RunConfig.default()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    else:
        cfg = cfg.with_seed(cfg.seed)
    if args.out:
        cfg = replace(cfg, output=args.out)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        try:
            cfg = load_config(args)
            cfg.validate()
        except (DriftGuardError, OSError, ValueError, TypeError) as exc:
            raise StageError("config", exc) from exc
        if args.command == "show-config":
            print(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
            return 0
        if args.command == "batch":
            agg = batch_runs(cfg, args.n_seeds)
            print((Path(cfg.output) / "aggregate.txt").read_text(encoding="utf-8"), end="")
            return 0 if agg["complete"] else 1
        life = Lifecycle(cfg, cfg.output)
        life.out.mkdir(parents=True, exist_ok=True)
        if args.command == "run":
            life.run()
            print((life.out / "report.txt").read_text(encoding="utf-8"), end="")
        elif args.command == "generate":
            life.ingest(force_synthetic=True)
        elif args.command == "ingest":
            life.ingest()
        else:
            result = getattr(life, args.command)()
            if args.command == "evaluate":
                print((life.out / "report.txt").read_text(encoding="utf-8"), end="")
            elif args.command == "diagnose" and result is not None:
                print(result.render(), end="")
        return 0
    except StageError as exc:
        print(f"driftguard: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
