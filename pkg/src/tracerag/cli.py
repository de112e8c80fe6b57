"""``trace`` command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config, parse_overrides
from .corpus import KGCacheError
from .pipeline import MissingArtifactError, Pipeline

SUBCOMMANDS = ("build-kg", "construct-chains", "answer", "evaluate", "run-all")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trace",
        description="Build question-local knowledge graphs, construct reasoning chains, answer and evaluate.",
        epilog="Any config field can be overridden with --<dotted.path> VALUE, e.g. --chain.K 15.",
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, type=Path, help="run config (JSON)")
    parser.add_argument("--limit", type=int, help="process only the first N questions")
    parser.add_argument("--mode", choices=("triple", "doc", "none", "all_docs", "top_t"))
    parser.add_argument("--workers", type=int, help="questions processed concurrently")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(rest)
        for key in ("limit", "mode", "workers"):
            if getattr(args, key) is not None:
                overrides[key] = getattr(args, key)
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"trace: {exc}", file=sys.stderr)
        return 2

    pipeline = Pipeline(cfg, base_dir=args.config.resolve().parent)
    try:
        if args.subcommand == "run-all":
            results, report = pipeline.run_all()
            for r in results:
                print(f"{r.stage}: {r.processed} questions, {r.failed} failed", file=sys.stderr)
            print(report.format_table())
        elif args.subcommand == "evaluate":
            print(pipeline.evaluate().format_table())
        else:
            stage = {"build-kg": pipeline.build_kg, "construct-chains": pipeline.construct_chains,
                     "answer": pipeline.answer}[args.subcommand]
            r = stage()
            print(f"{r.stage}: {r.processed} questions, {r.failed} failed", file=sys.stderr)
    except (MissingArtifactError, KGCacheError, FileNotFoundError, ValueError) as exc:
        print(f"trace {args.subcommand}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
