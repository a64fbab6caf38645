"""Desk-scale stenosed-tube run: simulate, fit, resample and report A-line errors.

    python3 scripts/run_headline.py [--config configs/default.toml] [--out runs/default]
"""

from __future__ import annotations

import argparse
import logging
import time
from pathlib import Path

from aoct import formats as fmt
from aoct.config import PipelineConfig
from aoct.metrics import aline_errors
from aoct.pipeline import run_pipeline


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "default.toml"))
    ap.add_argument("--out")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")

    cfg = PipelineConfig.load(args.config)
    if args.out:
        cfg = cfg.with_out(args.out)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    t0 = time.perf_counter()
    records = run_pipeline(cfg)
    for name, rec in records.items():
        print(f"{name:9s} {rec['wall_clock_s']:8.1f} s")

    out = Path(cfg.paths.out)
    gt = fmt.read_boundaries(out / "scan" / "boundaries_gt.csv")
    for label, path in (("teacher", out / "extract" / "boundaries.csv"),
                        ("resampled", out / "resample" / "boundaries.csv")):
        r = aline_errors(gt, fmt.read_boundaries(path))
        print(f"{label:9s} mu_dist {r['mu_dist_mm']:.4f} +- {r['mu_dist_std_mm']:.4f} mm   "
              f"M_dist {r['max_dist_mm']:.4f} +- {r['max_dist_std_mm']:.4f} mm   "
              f"worst {r['max_dist_overall_mm']:.4f} mm   missing {r['coverage_deficit']}")
    rec = fmt.read_json(out / "metrics" / "report.json")["reconstruction"]
    print(f"point-to-mesh mean {rec['point_to_mesh_mean_mm']:.4f} mm, p99 {rec['point_to_mesh_mm']['p99']:.4f} mm")
    print(f"total {time.perf_counter() - t0:.0f} s; outputs in {out}")


if __name__ == "__main__":
    main()
