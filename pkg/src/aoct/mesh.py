"""Explicit geometry from a field: marching-cubes meshes and sphere-traced A-lines."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from skimage.measure import marching_cubes

from .cloud import UnitTransform
from .extract import ALineBoundary
from .geometry import ScanConfig, aline_pose, beam_direction, sample_time


class EmptyMeshError(ValueError):
    pass


class AnalyticField:
    """Wrap a unit-space callable so it can stand in for a trained field."""

    def __init__(self, fn, transform: UnitTransform | None = None):
        self.fn = fn
        self.transform = transform if transform is not None else UnitTransform.identity()

    def __call__(self, q, chunk: int = 0):
        return np.asarray(self.fn(np.asarray(q, dtype=float)), dtype=float)


@dataclass(frozen=True)
class GridSpec:
    resolution: int = 192
    lo: float = -1.05
    hi: float = 1.05

    def diagnostics(self) -> list[str]:
        out = []
        if self.resolution < 8:
            out.append("grid resolution must be >= 8")
        if not self.hi > self.lo:
            out.append("grid bounds are degenerate")
        return out

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.resolution)

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.resolution - 1)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def compact(self) -> "TriangleMesh":
        """Drop vertices no triangle references."""
        used = np.unique(self.triangles)
        remap = np.full(len(self.vertices), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        normals = None if self.normals is None else self.normals[used]
        return TriangleMesh(self.vertices[used], remap[self.triangles], normals)


def sample_grid(field, grid: GridSpec) -> np.ndarray:
    ax = grid.axis
    n = grid.resolution
    vol = np.empty((n, n, n))
    yy, zz = np.meshgrid(ax, ax, indexing="ij")
    plane = np.stack([np.zeros(n * n), yy.ravel(), zz.ravel()], axis=1)
    for i, x in enumerate(ax):
        plane[:, 0] = x
        vol[i] = field(plane).reshape(n, n)
    return vol


def extract_mesh(field, grid: GridSpec = GridSpec(), z_crop: tuple | None = None,
                 min_area: float = 1e-12, volume: np.ndarray | None = None) -> TriangleMesh:
    """Zero level set of ``field`` sampled on ``grid`` (unit space), returned in mm.

    ``z_crop = (z0, z1)`` in mm removes triangles with any vertex outside the
    slab, which trims end closures on open tubes.
    """
    vol = sample_grid(field, grid) if volume is None else volume
    if not (vol.min() < 0 < vol.max()):
        raise EmptyMeshError("field has no zero crossing inside the grid bounds")
    h = grid.spacing
    verts, faces, normals, _ = marching_cubes(vol, level=0.0, spacing=(h, h, h),
                                              allow_degenerate=False)
    verts = verts + grid.lo
    world = field.transform.to_world(verts)
    # skimage normals point toward decreasing values; flip so they face outward (f > 0)
    mesh = TriangleMesh(world, faces.astype(np.int64), -normals)
    keep = mesh.triangle_areas() > min_area
    if z_crop is not None:
        z = mesh.vertices[:, 2][mesh.triangles]
        keep &= np.all((z >= z_crop[0]) & (z <= z_crop[1]), axis=1)
    mesh = TriangleMesh(mesh.vertices, mesh.triangles[keep], mesh.normals).compact()
    if len(mesh.triangles) == 0:
        raise EmptyMeshError("no triangles left after filtering")
    return mesh


def raycast(field, origins, dirs, d_max: float, eps_hit: float = 1e-4,
            max_steps: int = 512, chunk: int = 65536) -> np.ndarray:
    """Sphere trace rays (mm origins, unit directions) through ``field``.

    Steps by ``|f|`` in unit space until ``|f| < eps_hit`` (unit space) or
    the distance exceeds ``d_max`` mm. A sign change between consecutive
    samples is refined by bisection. Misses are NaN.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise ValueError("ray directions must be unit vectors")
    tf = field.transform
    o = tf.to_unit(origins)
    limit = d_max / tf.scale
    out = np.full(len(o), np.nan)
    for s in range(0, len(o), chunk):
        out[s:s + chunk] = _trace(field, o[s:s + chunk], dirs[s:s + chunk], limit, eps_hit, max_steps)
    return out * tf.scale


def _trace(field, o, v, limit, eps, max_steps):
    n = len(o)
    d = np.zeros(n)
    prev_d = np.zeros(n)
    f = field(o)
    prev_f = f.copy()
    result = np.full(n, np.nan)
    active = np.ones(n, dtype=bool)
    bracket_lo = np.full(n, np.nan)
    bracket_hi = np.full(n, np.nan)
    for _ in range(max_steps):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        hit = np.abs(f[idx]) < eps
        result[idx[hit]] = d[idx[hit]]
        crossed = ~hit & (np.sign(f[idx]) != np.sign(prev_f[idx])) & (d[idx] > 0)
        bracket_lo[idx[crossed]] = prev_d[idx[crossed]]
        bracket_hi[idx[crossed]] = d[idx[crossed]]
        active[idx[hit | crossed]] = False
        idx = idx[~(hit | crossed)]
        prev_d[idx] = d[idx]
        prev_f[idx] = f[idx]
        d[idx] = d[idx] + np.abs(f[idx])
        gone = d[idx] > limit
        active[idx[gone]] = False
        idx = idx[~gone]
        if len(idx):
            f[idx] = field(o[idx] + d[idx, None] * v[idx])
    # bisection on bracketed rays: the lower end keeps the starting sign
    idx = np.nonzero(~np.isnan(bracket_lo))[0]
    if len(idx):
        a, b = bracket_lo[idx], bracket_hi[idx]
        sa = np.sign(field(o[idx] + a[:, None] * v[idx]))
        for _ in range(64):
            m = 0.5 * (a + b)
            fm = field(o[idx] + m[:, None] * v[idx])
            same = np.sign(fm) == sa
            a = np.where(same, m, a)
            b = np.where(same, b, m)
            if np.all(np.minimum(np.abs(fm), b - a) < eps):
                break
        result[idx] = 0.5 * (a + b)
    return np.where(result <= limit, result, np.nan)


def raycast_sdf(field, origin, direction, d_max: float, eps_hit: float = 1e-4):
    """Single-ray form; returns None on a miss."""
    d = raycast(field, [origin], [direction], d_max, eps_hit)[0]
    return None if np.isnan(d) else float(d)


def resample_boundaries(field, cfg: ScanConfig, eps_hit: float = 1e-4) -> list[ALineBoundary]:
    """Cast every A-line of the scan through the field using the acquisition geometry."""
    M, N = cfg.n_frames, cfg.n_columns
    fr, col = np.meshgrid(np.arange(M), np.arange(N), indexing="ij")
    t = sample_time(fr.ravel(), col.ravel(), cfg)
    theta, z_cath = aline_pose(t, cfg)
    origins = np.stack([np.zeros_like(z_cath), np.zeros_like(z_cath), z_cath], axis=1)
    dirs = beam_direction(theta, cfg.phi_cath)
    d = raycast(field, origins, dirs, cfg.d_max, eps_hit).reshape(M, N)
    return [ALineBoundary(i, d[i], "resampled") for i in range(M)]


def scan_z_range(cfg: ScanConfig) -> tuple[float, float]:
    """Axial extent (mm) touched by wall hits of the scan."""
    z_a = cfg.z_start
    z_b = cfg.z_start + cfg.pullback_sign * cfg.v_cath * cfg.duration
    reach = cfg.d_max * abs(math.cos(cfg.phi_cath))
    return min(z_a, z_b) - reach, max(z_a, z_b) + reach
