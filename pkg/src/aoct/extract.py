"""Per-column wall boundaries from segmentations and the raw Cartesian point cloud."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .cloud import PointCloud
from .geometry import DomainError, ScanConfig, sample_time, to_cartesian, to_cylindrical

log = logging.getLogger(__name__)

SOURCES = ("mask", "intensity", "resampled", "truth")


@dataclass
class ALineBoundary:
    """Line-of-sight wall distance per column of one frame; NaN marks "no wall"."""

    frame_index: int
    d_tiss: np.ndarray
    source: str = "mask"
    low_confidence: np.ndarray = field(default=None)

    def __post_init__(self):
        self.d_tiss = np.asarray(self.d_tiss, dtype=float)
        if self.low_confidence is None:
            self.low_confidence = np.zeros(len(self.d_tiss), dtype=bool)
        self.low_confidence = np.asarray(self.low_confidence, dtype=bool)
        if self.source not in SOURCES:
            raise ValueError(f"unknown boundary source {self.source!r}")

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.d_tiss)

    def check(self, cfg: ScanConfig) -> None:
        if len(self.d_tiss) != cfg.n_columns:
            raise DomainError(f"frame {self.frame_index}: {len(self.d_tiss)} columns, expected {cfg.n_columns}")
        d = self.d_tiss[self.present]
        if np.any(d < 0) or np.any(d > cfg.d_max):
            raise DomainError(f"frame {self.frame_index}: d_tiss outside [0, {cfg.d_max}]")


def boundary_from_mask(mask: np.ndarray, cfg: ScanConfig, frame_index: int = 0,
                       start_rows: int | None = None, gap: int = 3) -> ALineBoundary:
    """Far edge of the lumen run in every column of an ``(H, N)`` lumen mask.

    Runs of 1s separated by at most ``gap`` zero rows are merged. Among merged
    runs starting within the first ``start_rows`` rows (default ``H // 8``) the
    longest wins, ties going to the one nearest the catheter. Columns holding
    more than one merged run are flagged low-confidence.
    """
    m = np.asarray(mask) > 0
    H, N = m.shape
    if (H, N) != (cfg.frame_height, cfg.n_columns):
        raise DomainError(f"mask shape {m.shape} does not match scan ({cfg.frame_height}, {cfg.n_columns})")
    K = H // 8 if start_rows is None else start_rows
    d = np.full(N, np.nan)
    low = np.zeros(N, dtype=bool)
    if not m.any():
        log.warning("frame %d: empty mask, all columns absent", frame_index)
        return ALineBoundary(frame_index, d, "mask", low)

    padded = np.zeros((N, H + 2), dtype=np.int8)
    padded[:, 1:-1] = m.T
    step = np.diff(padded, axis=1)
    s_col, s_row = np.nonzero(step == 1)
    e_col, e_row = np.nonzero(step == -1)
    e_row = e_row - 1  # last row of the run
    new = np.ones(len(s_col), dtype=bool)
    new[1:] = (s_col[1:] != s_col[:-1]) | (s_row[1:] - e_row[:-1] - 1 > gap)
    first = np.nonzero(new)[0]
    g_col = s_col[first]
    g_start = s_row[first]
    g_end = np.maximum.reduceat(e_row, first)
    g_len = g_end - g_start + 1

    n_groups = np.bincount(g_col, minlength=N)
    low[n_groups > 1] = True
    ok = g_start < K
    if ok.any():
        c, ln, st, en = g_col[ok], g_len[ok], g_start[ok], g_end[ok]
        order = np.lexsort((st, -ln, c))
        c, en = c[order], en[order]
        cols, pick = np.unique(c, return_index=True)
        d[cols] = (en[pick] + 0.5) * cfg.pixel_size
    return ALineBoundary(frame_index, d, "mask", low)


def _nan_median_wrap(d: np.ndarray, width: int) -> np.ndarray:
    half = width // 2
    idx = (np.arange(len(d))[:, None] + np.arange(-half, half + 1)[None, :]) % len(d)
    win = d[idx]
    out = np.full(len(d), np.nan)
    has = ~np.all(np.isnan(win), axis=1)
    out[has] = np.nanmedian(win[has], axis=1)
    return np.where(np.isnan(d), np.nan, out)


def boundary_from_intensity(frame: np.ndarray, cfg: ScanConfig, frame_index: int = 0,
                            threshold: float = 0.5, min_run: int = 3,
                            median_width: int = 0) -> ALineBoundary:
    """Classical wall detector on a normalized ``(H, N)`` frame.

    The wall is the first row starting ``min_run`` consecutive rows at or
    above ``threshold``; the boundary sits half a pixel above that row. With
    ``threshold=0`` every column reports its first row.
    """
    f = np.asarray(frame, dtype=float)
    H, N = f.shape
    if (H, N) != (cfg.frame_height, cfg.n_columns):
        raise DomainError(f"frame shape {f.shape} does not match scan ({cfg.frame_height}, {cfg.n_columns})")
    above = (f >= threshold).astype(np.int32)
    run = max(int(min_run), 1)
    csum = np.concatenate([np.zeros((1, N), dtype=np.int32), np.cumsum(above, axis=0)])
    window = csum[run:] - csum[:-run]
    sustained = window == run
    found = sustained.any(axis=0)
    first = sustained.argmax(axis=0)
    d = np.where(found, np.maximum(first - 0.5, 0.0) * cfg.pixel_size, np.nan)
    if median_width > 1:
        d = _nan_median_wrap(d, median_width)
    return ALineBoundary(frame_index, d, "intensity")


def pointcloud_from_scan(boundaries: Iterable[ALineBoundary], cfg: ScanConfig) -> PointCloud:
    """Map every present ``(frame, column, d_tiss)`` through the helical geometry."""
    boundaries = sorted(boundaries, key=lambda b: b.frame_index)
    frames = [b.frame_index for b in boundaries]
    if len(set(frames)) != len(frames):
        raise DomainError("duplicate frame indices in boundaries")
    pts, prov = [], []
    for b in boundaries:
        b.check(cfg)
        cols = np.nonzero(b.present)[0]
        if len(cols) == 0:
            continue
        fr = np.full(len(cols), b.frame_index)
        pts.append(to_cartesian(to_cylindrical(fr, cols, b.d_tiss[cols], cfg)))
        prov.append(np.stack([fr, cols], axis=1))
    if not pts:
        log.warning("no wall samples present; point cloud is empty")
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 2), dtype=np.int64))
    return PointCloud(np.concatenate(pts), np.concatenate(prov))


def boundaries_from_array(d: np.ndarray, source: str = "truth") -> list[ALineBoundary]:
    """Wrap an ``(M, N)`` distance array as per-frame boundaries."""
    return [ALineBoundary(i, row.copy(), source) for i, row in enumerate(np.asarray(d, dtype=float))]


def boundaries_to_array(boundaries: Iterable[ALineBoundary], n_frames: int, n_columns: int) -> np.ndarray:
    out = np.full((n_frames, n_columns), np.nan)
    for b in boundaries:
        out[b.frame_index] = b.d_tiss
    return out


def boundary_times(frame_index: int, cfg: ScanConfig) -> np.ndarray:
    return sample_time(np.full(cfg.n_columns, frame_index), np.arange(cfg.n_columns), cfg)
