"""Segmentation overlap, point-set distances, A-line errors and point-to-mesh error."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .extract import ALineBoundary
from .mesh import TriangleMesh


class MetricError(ValueError):
    pass


def _points(a) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    if len(a) == 0:
        raise MetricError("point set is empty")
    return a


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Overlap of two binary masks; two empty masks count as a perfect match."""
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    if a.shape != b.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _nn_sqdist(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Squared distance from each ``src`` point to its nearest ``dst`` point."""
    _, idx = cKDTree(dst).query(src, k=1)
    diff = src - dst[idx]
    return (diff * diff).sum(axis=1)


def chamfer(a, b) -> float:
    """Symmetric mean of squared nearest-neighbour distances."""
    a, b = _points(a), _points(b)
    return float(_nn_sqdist(a, b).mean() + _nn_sqdist(b, a).mean())


def hausdorff(a, b) -> float:
    a, b = _points(a), _points(b)
    return float(np.sqrt(max(_nn_sqdist(a, b).max(), _nn_sqdist(b, a).max())))


def emd(a, b, cap: int = 256, seed: int = 0) -> float:
    """Mean matched distance of the optimal one-to-one assignment.

    Both sets are subsampled without replacement to ``min(|a|, |b|, cap)``
    points first. Both draws use the same seed, so identical inputs give
    identical subsamples. The matched costs are summed exactly (``fsum``),
    which makes the result independent of the assignment's ordering.
    """
    a, b = _points(a), _points(b)
    n = min(len(a), len(b), cap)
    if len(a) > n:
        a = a[np.sort(np.random.default_rng(seed).choice(len(a), n, replace=False))]
    if len(b) > n:
        b = b[np.sort(np.random.default_rng(seed).choice(len(b), n, replace=False))]
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))
    rows, cols = linear_sum_assignment(cost)
    return math.fsum(cost[rows, cols]) / n


# --------------------------------------------------------------------------
# A-line errors


def aline_errors(gt: Sequence[ALineBoundary], pred: Sequence[ALineBoundary]) -> dict:
    """Per-frame mean / max line-of-sight error over columns present in both.

    Aggregates follow the mean +- std over frames convention; columns present
    on only one side are reported as coverage deficit.
    """
    pred_by_frame = {b.frame_index: b for b in pred}
    frames = []
    for g in sorted(gt, key=lambda b: b.frame_index):
        p = pred_by_frame.get(g.frame_index)
        if p is None:
            raise MetricError(f"frame {g.frame_index} missing from prediction")
        if len(p.d_tiss) != len(g.d_tiss):
            raise MetricError(f"frame {g.frame_index}: column counts differ")
        both = g.present & p.present
        row = {
            "frame": g.frame_index,
            "n_joint": int(both.sum()),
            "missing_pred": int((g.present & ~p.present).sum()),
            "missing_gt": int((~g.present & p.present).sum()),
        }
        if both.any():
            err = np.abs(g.d_tiss[both] - p.d_tiss[both])
            row["mu_dist_mm"] = float(err.mean())
            row["max_dist_mm"] = float(err.max())
            row["total_variation_pred_mm"] = _total_variation(p.d_tiss)
        frames.append(row)
    scored = [r for r in frames if r["n_joint"] > 0]
    if not scored:
        raise MetricError("no column is present in both ground truth and prediction")
    mu = np.array([r["mu_dist_mm"] for r in scored])
    mx = np.array([r["max_dist_mm"] for r in scored])
    return {
        "mu_dist_mm": float(mu.mean()),
        "mu_dist_std_mm": float(mu.std()),
        "max_dist_mm": float(mx.mean()),
        "max_dist_std_mm": float(mx.std()),
        "max_dist_overall_mm": float(mx.max()),
        "n_frames_scored": len(scored),
        "coverage_deficit": int(sum(r["missing_pred"] + r["missing_gt"] for r in frames)),
        "frames": frames,
    }


def _total_variation(d: np.ndarray) -> float:
    """Circular total variation over present columns (absent columns are skipped)."""
    v = d[~np.isnan(d)]
    if len(v) < 2:
        return 0.0
    return float(np.abs(np.diff(np.append(v, v[0]))).sum())


def total_variation(b: ALineBoundary) -> float:
    return _total_variation(b.d_tiss)


# --------------------------------------------------------------------------
# point to mesh


def closest_point_on_triangles(p, a, b, c) -> np.ndarray:
    """Closest point on triangle ``(a, b, c)`` to ``p``; all inputs ``(n, 3)``."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    choices = [
        a,
        b,
        a + t_ab[:, None] * ab,
        c,
        a + t_ac[:, None] * ac,
        b + t_bc[:, None] * (c - b),
    ]
    cond3 = [np.broadcast_to(k[:, None], a.shape) for k in conds]
    inside = a + v[:, None] * ab + w[:, None] * ac
    return np.select(cond3, choices, default=inside)


def point_triangle_distance(p, a, b, c) -> np.ndarray:
    q = closest_point_on_triangles(p, a, b, c)
    diff = p - q
    return np.sqrt((diff * diff).sum(-1))


def _point_to_mesh_distances(points: np.ndarray, mesh: TriangleMesh, batch: int = 2_000_000) -> np.ndarray:
    V, T = mesh.vertices, mesh.triangles
    A, B, C = V[T[:, 0]], V[T[:, 1]], V[T[:, 2]]
    cen = (A + B + C) / 3.0
    rad = np.sqrt(np.max([((X - cen) ** 2).sum(-1) for X in (A, B, C)], axis=0))
    r_max = float(rad.max())
    tree = cKDTree(cen)
    k = min(4, len(T))
    _, near = tree.query(points, k=k)
    near = near.reshape(len(points), -1)
    ub = np.full(len(points), np.inf)
    for j in range(near.shape[1]):
        t = near[:, j]
        ub = np.minimum(ub, point_triangle_distance(points, A[t], B[t], C[t]))
    # any triangle closer than ub has its centroid within ub + r_max
    cands = tree.query_ball_point(points, ub + r_max * (1 + 1e-12) + 1e-12)
    counts = np.fromiter((len(c) for c in cands), dtype=np.int64, count=len(points))
    tri = np.fromiter((i for c in cands for i in c), dtype=np.int64, count=int(counts.sum()))
    pid = np.repeat(np.arange(len(points)), counts)
    dist = np.empty(len(tri))
    for s in range(0, len(tri), batch):
        sl = slice(s, s + batch)
        t = tri[sl]
        dist[sl] = point_triangle_distance(points[pid[sl]], A[t], B[t], C[t])
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return np.minimum(np.minimum.reduceat(dist, starts), ub)


def point_to_mesh(points, mesh: TriangleMesh) -> dict:
    """Exact point-to-triangle distances (mm) from every point to the mesh, summarized."""
    pts = _points(points)
    if len(mesh.triangles) == 0:
        raise MetricError("mesh has no triangles")
    d = _point_to_mesh_distances(pts, mesh)
    pct = np.percentile(d, [50, 90, 95, 99])
    return {
        "mean": float(d.mean()),
        "max": float(d.max()),
        "p50": float(pct[0]),
        "p90": float(pct[1]),
        "p95": float(pct[2]),
        "p99": float(pct[3]),
        "distances": d,
    }


def point_to_mesh_distances(points, mesh: TriangleMesh) -> np.ndarray:
    return _point_to_mesh_distances(_points(points), mesh)
