"""Compare raw mask boundaries with field-resampled boundaries on noisy teacher masks.

Expects a finished run of configs/noisy.toml (``aoct pipeline --config configs/noisy.toml``).
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from aoct import formats as fmt
from aoct.metrics import aline_errors, total_variation


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run", nargs="?", default="runs/noisy")
    args = ap.parse_args()
    out = Path(args.run)
    gt = fmt.read_boundaries(out / "scan" / "boundaries_gt.csv")
    raw = fmt.read_boundaries(out / "extract" / "boundaries.csv")
    res = fmt.read_boundaries(out / "resample" / "boundaries.csv")
    tv_raw = np.array([total_variation(b) for b in raw])
    tv_res = np.array([total_variation(b) for b in res])
    tv_gt = np.array([total_variation(b) for b in gt])
    print(f"total variation per frame (mm): truth {tv_gt.mean():.3f}, raw {tv_raw.mean():.3f}, "
          f"resampled {tv_res.mean():.3f}")
    print(f"resampled smoother in {100 * np.mean(tv_res < tv_raw):.0f}% of frames")
    for label, b in (("raw", raw), ("resampled", res)):
        r = aline_errors(gt, b)
        print(f"{label:9s} mu_dist {r['mu_dist_mm']:.4f} mm  M_dist {r['max_dist_mm']:.4f} mm  "
              f"missing {r['coverage_deficit']}")


if __name__ == "__main__":
    main()
