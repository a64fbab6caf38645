"""Command line entry point: ``aoct <stage> --config FILE [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import STAGES, PipelineConfig, validate_config
from .pipeline import StageError, run_pipeline, run_stage

HELP = {
    "simulate": "simulate a phantom pull-back: frames, masks, ground-truth boundaries",
    "extract": "per-column boundaries from masks (or frames) and the raw point cloud",
    "fit": "fit the signed distance field to the point cloud with the pulling loss",
    "mesh": "marching-cubes mesh of the fitted field's zero level set",
    "resample": "cast every A-line through the fitted field",
    "metrics": "evaluate boundaries and reconstruction; write report.json",
    "pipeline": "run all six stages in order",
    "validate": "check the configuration and print diagnostics",
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aoct", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "pipeline", "validate"):
        s = sub.add_parser(name, help=HELP[name], description=HELP[name])
        s.add_argument("--config", help="TOML configuration (defaults apply when omitted)")
        s.add_argument("--seed", type=int, help="global seed for every stochastic stage")
        s.add_argument("--out", help="output directory (overrides paths.out)")
    return p


def _limit_threads():
    n = os.environ.get("AOCT_NUM_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = PipelineConfig.load(args.config)
    except (OSError, ValueError, TypeError) as exc:
        print(f"aoct: cannot load config: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg = cfg.with_out(args.out)
    _limit_threads()
    if args.command == "validate":
        problems = validate_config(cfg)
        for msg in problems:
            print(msg)
        return 1 if problems else 0
    try:
        if args.command == "pipeline":
            records = run_pipeline(cfg)
        else:
            records = {args.command: run_stage(args.command, cfg)}
    except StageError as exc:
        print(f"aoct {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # any stage failure must surface as a nonzero exit
        logging.getLogger("aoct").exception("stage failed")
        print(f"aoct {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for name, rec in records.items():
        print(f"{name}: {rec['wall_clock_s']:.1f}s, {len(rec['outputs'])} outputs, "
              f"{len(rec['warnings'])} warnings")
    return 0
