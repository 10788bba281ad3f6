"""Command-line entry point: ``carbon-incentive <stage|all> [--config PATH] ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from typing import Optional, Sequence

from . import pipeline
from .pipeline import STAGE_ORDER, PipelineConfig, PipelineError


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="carbon-incentive", description="Synthetic-city evaluation pipeline for a low-carbon travel incentive.")
    ap.add_argument("command", choices=[*STAGE_ORDER, "all"])
    ap.add_argument("--config", help="JSON configuration file (defaults are used when omitted)")
    ap.add_argument("--seed", type=int, help="master seed, overrides the config")
    ap.add_argument("--out", help="output directory, overrides the config")
    ap.add_argument("--threads", type=int, help="worker threads for forest training")
    ap.add_argument("--verbose", "-v", action="store_true")
    return ap


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {k: getattr(args, k) for k in ("seed", "out", "threads") if getattr(args, k) is not None}
    if overrides:
        cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        report = pipeline.run(args.command, cfg)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 4
    summary = {name: {"status": s["status"], "wall_time_s": round(s["wall_time_s"], 2)} for name, s in report.stages.items()}
    print(json.dumps(summary, indent=2))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
