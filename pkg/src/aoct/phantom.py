"""Synthetic airway phantoms with analytic walls and a helical scan simulator.

World frame = catheter frame: the catheter runs along the z axis and the
lumen centerline sits at ``centerline_offset`` in the xy plane. Polar angles
around the lumen follow the same ``x = r*sin(theta), y = r*cos(theta)``
convention as the scan geometry.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import TWO_PI, DomainError, ScanConfig, aline_pose, beam_direction, sample_time


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Stenosis:
    z0: float
    depth: float
    width: float


@dataclass(frozen=True)
class Phantom:
    base_radius: float = 3.0
    length: float = 60.0
    stenoses: tuple = ()
    ellipticity: float = 1.0
    ellipse_angle: float = 0.0
    centerline_offset: tuple = (0.0, 0.0)
    capped: bool = False

    def __post_init__(self):
        st = tuple(s if isinstance(s, Stenosis) else Stenosis(**s) for s in self.stenoses)
        object.__setattr__(self, "stenoses", st)
        object.__setattr__(self, "centerline_offset", tuple(float(v) for v in self.centerline_offset))

    def diagnostics(self) -> list[str]:
        out = []
        if not self.base_radius > 0:
            out.append("base_radius must be > 0")
        if not self.length > 0:
            out.append("length must be > 0")
        if not 0 < self.ellipticity <= 1:
            out.append("ellipticity must lie in (0, 1]")
        for s in self.stenoses:
            if not 0 <= s.depth < 1:
                out.append(f"stenosis depth must lie in [0, 1) (got {s.depth})")
            if not s.width > 0:
                out.append(f"stenosis width must be > 0 (got {s.width})")
        if sum(s.depth for s in self.stenoses) >= 1:
            out.append("sum of stenosis depths must be < 1 so the radius stays positive")
        if not out and math.hypot(*self.centerline_offset) >= self.min_radius():
            out.append("centerline_offset must be smaller than the minimum lumen radius")
        return out

    def validate(self) -> "Phantom":
        problems = self.diagnostics()
        if problems:
            raise DomainError("; ".join(problems))
        return self

    @property
    def is_plain_tube(self) -> bool:
        return not self.stenoses and self.ellipticity == 1.0

    def min_radius(self) -> float:
        z = np.linspace(0.0, self.length, 4001)
        for s in self.stenoses:
            z = np.append(z, np.clip(s.z0, 0.0, self.length))
        return float(self.base_radius * _axial(self, z).min() * self.ellipticity)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stenoses"] = [asdict(s) for s in self.stenoses]
        d["centerline_offset"] = list(self.centerline_offset)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Phantom":
        d = dict(d)
        d["stenoses"] = tuple(Stenosis(**s) for s in d.get("stenoses", ()))
        d["centerline_offset"] = tuple(d.get("centerline_offset", (0.0, 0.0)))
        return cls(**d)


def _axial(ph: Phantom, z, order: int = 0):
    """Axial profile ``1 - sum depth*gauss`` and its z derivatives."""
    z = np.asarray(z, dtype=float)
    val = np.ones_like(z) if order == 0 else np.zeros_like(z)
    for s in ph.stenoses:
        u = (z - s.z0) / s.width
        gauss = s.depth * np.exp(-0.5 * u * u)
        if order == 0:
            val = val - gauss
        elif order == 1:
            val = val + gauss * u / s.width
        else:
            val = val + gauss * (1.0 - u * u) / s.width ** 2
    return val


def _elliptic(ph: Phantom, theta, order: int = 0):
    """Polar radius of an ellipse with unit major axis and its theta derivatives."""
    theta = np.asarray(theta, dtype=float)
    b = ph.ellipticity
    if b == 1.0:
        return np.ones_like(theta) if order == 0 else np.zeros_like(theta)
    psi = theta - ph.ellipse_angle
    k = 1.0 - b * b
    dd = b * b + k * np.sin(psi) ** 2
    if order == 0:
        return b / np.sqrt(dd)
    d1 = k * np.sin(2 * psi)
    if order == 1:
        return -0.5 * b * dd ** -1.5 * d1
    d2 = 2 * k * np.cos(2 * psi)
    return 0.75 * b * dd ** -2.5 * d1 * d1 - 0.5 * b * dd ** -1.5 * d2


def _radius(ph: Phantom, z, theta):
    return ph.base_radius * _axial(ph, z) * _elliptic(ph, theta)


def phantom_radius(ph: Phantom, z, theta):
    """Lumen radius at axial position ``z`` and lumen-frame angle ``theta``."""
    z = np.asarray(z, dtype=float)
    if np.any(z < 0) or np.any(z > ph.length):
        raise DomainError(f"z outside phantom [0, {ph.length}]")
    r = _radius(ph, z, theta)
    return float(r) if r.ndim == 0 else r


def _lumen_polar(ph: Phantom, p: np.ndarray):
    cx, cy = ph.centerline_offset
    x = p[..., 0] - cx
    y = p[..., 1] - cy
    return np.hypot(x, y), np.mod(np.arctan2(x, y), TWO_PI)


def _surface(ph: Phantom, z, th):
    """Surface point S(z, th) and first/second partials, each ``(..., 3)``."""
    A, A1, A2 = (_axial(ph, z, k) for k in range(3))
    E, E1, E2 = (_elliptic(ph, th, k) for k in range(3))
    R = ph.base_radius
    rho, rz, rt = R * A * E, R * A1 * E, R * A * E1
    rzz, rzt, rtt = R * A2 * E, R * A1 * E1, R * A * E2
    s, c = np.sin(th), np.cos(th)
    cx, cy = ph.centerline_offset
    zero, one = np.zeros_like(z), np.ones_like(z)
    S = np.stack([cx + rho * s, cy + rho * c, z], -1)
    Sz = np.stack([rz * s, rz * c, one], -1)
    St = np.stack([rt * s + rho * c, rt * c - rho * s, zero], -1)
    Szz = np.stack([rzz * s, rzz * c, zero], -1)
    Szt = np.stack([rzt * s + rz * c, rzt * c - rz * s, zero], -1)
    Stt = np.stack([rtt * s + 2 * rt * c - rho * s, rtt * c - 2 * rt * s - rho * c, zero], -1)
    return S, Sz, St, Szz, Szt, Stt


def _project(ph: Phantom, p: np.ndarray, n_grid: int = 25, iters: int = 60):
    """Closest lateral-wall point to each row of ``p`` (coarse search + Newton)."""
    r, th0 = _lumen_polar(ph, p)
    z0 = p[:, 2]
    S0 = _surface(ph, z0, th0)[0]
    bound = np.sqrt(((S0 - p) ** 2).sum(-1))
    # any closest point lies inside the ball of radius `bound` around p
    u = np.linspace(-1.0, 1.0, n_grid)
    zc = z0[:, None, None] + bound[:, None, None] * u[None, :, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        half = np.where(bound < 0.9 * r, np.arcsin(np.clip(bound / np.maximum(r, 1e-300), 0, 1)) * 1.2, math.pi)
    tc = th0[:, None, None] + np.minimum(half, math.pi)[:, None, None] * u[None, None, :]
    zc, tc = np.broadcast_arrays(zc, tc)
    Sc = _surface(ph, zc, tc)[0]
    d2 = ((Sc - p[:, None, None, :]) ** 2).sum(-1).reshape(len(p), -1)
    best = d2.argmin(axis=1)
    z = zc.reshape(len(p), -1)[np.arange(len(p)), best]
    th = tc.reshape(len(p), -1)[np.arange(len(p)), best]
    for _ in range(iters):
        S, Sz, St, Szz, Szt, Stt = _surface(ph, z, th)
        res = S - p
        gz = (res * Sz).sum(-1)
        gt = (res * St).sum(-1)
        hzz = (Sz * Sz).sum(-1) + (res * Szz).sum(-1)
        hzt = (Sz * St).sum(-1) + (res * Szt).sum(-1)
        htt = (St * St).sum(-1) + (res * Stt).sum(-1)
        det = hzz * htt - hzt * hzt
        pd = (det > 0) & (hzz > 0)
        # Gauss-Newton fallback where the full Hessian is indefinite
        gzz = (Sz * Sz).sum(-1)
        gzt = (Sz * St).sum(-1)
        gtt = (St * St).sum(-1)
        hzz = np.where(pd, hzz, gzz)
        hzt = np.where(pd, hzt, gzt)
        htt = np.where(pd, htt, gtt)
        det = hzz * htt - hzt * hzt
        dz = -(htt * gz - hzt * gt) / det
        dt = -(hzz * gt - hzt * gz) / det
        z = z + dz
        th = th + dt
        if max(np.abs(dz).max(initial=0.0), np.abs(dt).max(initial=0.0)) < 1e-14:
            break
    S = _surface(ph, z, th)[0]
    return S, z, th


def phantom_sdf(ph: Phantom, p) -> np.ndarray:
    """Signed distance to the lumen wall: negative in the air column, positive in tissue."""
    p = np.asarray(p, dtype=float)
    flat = p.reshape(-1, 3)
    r, th = _lumen_polar(ph, flat)
    z = flat[:, 2]
    rho = _radius(ph, z, th)
    if ph.is_plain_tube:
        d = r - rho
    else:
        S, _, _ = _project(ph, flat)
        dist = np.sqrt(((S - flat) ** 2).sum(-1))
        d = np.where(r < rho, -dist, dist)
    if ph.capped:
        d = np.maximum(d, np.maximum(-z, z - ph.length))
    return d.reshape(p.shape[:-1]) if p.ndim > 1 else float(d[0])


# --------------------------------------------------------------------------
# ray casting


def _wall_residual(ph: Phantom, pts: np.ndarray) -> np.ndarray:
    """Positive inside the lumen, zero on the wall (mm, radial)."""
    r, th = _lumen_polar(ph, pts)
    return _radius(ph, pts[..., 2], th) - r


def cast_alines(ph: Phantom, t, cfg: ScanConfig, tol: float = 1e-9) -> np.ndarray:
    """First wall hit distance along each A-line at times ``t``; NaN where no wall within d_max."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    theta, z_cath = aline_pose(t, cfg)
    theta = np.atleast_1d(theta)
    z_cath = np.atleast_1d(z_cath)
    origin = np.stack([np.zeros_like(z_cath), np.zeros_like(z_cath), z_cath], -1)
    direction = beam_direction(theta, cfg.phi_cath)
    if np.any(_wall_residual(ph, origin) <= 0):
        raise DomainError("catheter lies outside the lumen")
    cx, cy = ph.centerline_offset
    if ph.is_plain_tube and cx == 0 and cy == 0:
        d = np.full(len(t), ph.base_radius / math.sin(cfg.phi_cath))
        return np.where(d <= cfg.d_max, d, np.nan)

    step = min(ph.base_radius / 64.0, cfg.d_max / 64.0)
    n_steps = int(math.ceil(cfg.d_max / step))
    lo = np.zeros(len(t))
    hi = np.full(len(t), np.nan)
    active = np.ones(len(t), dtype=bool)
    for k in range(1, n_steps + 1):
        d = min(k * step, cfg.d_max)
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        g = _wall_residual(ph, origin[idx] + d * direction[idx])
        crossed = g <= 0
        hi[idx[crossed]] = d
        lo[idx[~crossed]] = d
        active[idx[crossed]] = False
    hit = ~np.isnan(hi)
    idx = np.nonzero(hit)[0]
    a, b = lo[idx], hi[idx]
    o, v = origin[idx], direction[idx]
    for _ in range(200):
        m = 0.5 * (a + b)
        g = _wall_residual(ph, o + m[:, None] * v)
        inside = g > 0
        a = np.where(inside, m, a)
        b = np.where(inside, b, m)
        if np.all(b - a < 1e-13):
            break
    out = np.full(len(t), np.nan)
    m = 0.5 * (a + b)
    res = np.abs(_wall_residual(ph, o + m[:, None] * v))
    if np.any(res > tol):
        raise FloatingPointError(f"bisection residual {res.max():.3g} mm above tolerance")
    out[idx] = m
    return out


def cast_aline(ph: Phantom, t: float, cfg: ScanConfig):
    """Scalar convenience wrapper; returns None for a no-wall A-line."""
    d = cast_alines(ph, [t], cfg)[0]
    return None if np.isnan(d) else float(d)


# --------------------------------------------------------------------------
# scan simulation


@dataclass(frozen=True)
class NoiseParams:
    speckle: bool = True
    speckle_looks: float = 4.0
    background: float = 0.05
    band_amplitude: float = 0.9
    band_thickness: float = 1.0
    decay_length: float = 0.6
    mask_jitter_px: float = 0.0
    mask_dropout: float = 0.0

    @classmethod
    def noiseless(cls) -> "NoiseParams":
        return cls(speckle=False)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroundTruthScan:
    """Simulated scan. Arrays are ``frames``/``masks``: ``(M, H, N)`` uint8,
    ``boundaries``: ``(M, N)`` float mm (NaN = no wall).

    ``teacher_masks`` are the masks handed to extraction (corrupted copies of
    ``masks`` when mask noise is configured).
    """

    frames: np.ndarray
    masks: np.ndarray
    boundaries: np.ndarray
    phantom: Phantom
    cfg: ScanConfig
    teacher_masks: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.teacher_masks is None:
            self.teacher_masks = self.masks


def coverage_diagnostics(ph: Phantom, cfg: ScanConfig) -> list[str]:
    z_a = cfg.z_start
    z_b = cfg.z_start + cfg.pullback_sign * cfg.v_cath * cfg.duration
    reach = cfg.d_max * abs(math.cos(cfg.phi_cath))
    lo, hi = min(z_a, z_b) - reach, max(z_a, z_b) + reach
    if lo < 0 or hi > ph.length:
        return [
            f"pull-back covers z in [{lo:.4g}, {hi:.4g}] mm but the phantom spans "
            f"[0, {ph.length:.4g}] mm; lengthen the phantom or shorten the scan"
        ]
    return []


def rasterize_boundaries(d: np.ndarray, cfg: ScanConfig) -> np.ndarray:
    """Lumen masks from per-column distances: row k is lumen iff ``k * px < d``."""
    d = np.asarray(d, dtype=float)
    rows = np.arange(cfg.frame_height, dtype=float) * cfg.pixel_size
    dd = np.where(np.isnan(d), -np.inf, d)
    return (rows[:, None] < dd[..., None, :]).astype(np.uint8)


def render_frame(d: np.ndarray, cfg: ScanConfig, noise: NoiseParams, rng) -> np.ndarray:
    """8-bit intensity frame: dark lumen, bright wall band decaying with depth."""
    rows = np.arange(cfg.frame_height, dtype=float)[:, None] * cfg.pixel_size
    depth = rows - np.where(np.isnan(d), np.inf, d)[None, :]
    tissue = depth >= 0
    band = noise.band_amplitude * np.exp(-np.where(tissue, depth, 0.0) / noise.decay_length)
    band = np.where(depth >= noise.band_thickness, 0.25 * band, band)
    img = np.where(tissue, band, 0.0) + noise.background
    if noise.speckle:
        img = img * rng.gamma(noise.speckle_looks, 1.0 / noise.speckle_looks, size=img.shape)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def corrupt_boundaries(d: np.ndarray, cfg: ScanConfig, jitter_px: float, dropout: float,
                       rng) -> np.ndarray:
    """Per-column Gaussian boundary jitter (in pixels) plus random column dropout."""
    out = d + rng.normal(0.0, jitter_px, size=d.shape) * cfg.pixel_size
    out = np.clip(out, 0.0, cfg.d_max)
    out[rng.random(size=d.shape) < dropout] = np.nan
    return out


def simulate_scan(ph: Phantom, cfg: ScanConfig, noise: NoiseParams = NoiseParams(),
                  seed: int = 0) -> GroundTruthScan:
    ph.validate()
    cfg.validate()
    problems = coverage_diagnostics(ph, cfg)
    if problems:
        raise ConfigError(problems[0])
    M, N, H = cfg.n_frames, cfg.n_columns, cfg.frame_height
    frames_idx, cols = np.meshgrid(np.arange(M), np.arange(N), indexing="ij")
    t = sample_time(frames_idx.ravel(), cols.ravel(), cfg)
    bounds = cast_alines(ph, t, cfg).reshape(M, N)
    frames = np.empty((M, H, N), dtype=np.uint8)
    masks = np.empty((M, H, N), dtype=np.uint8)
    noisy_masks = noise.mask_jitter_px > 0 or noise.mask_dropout > 0
    teacher = np.empty((M, H, N), dtype=np.uint8) if noisy_masks else None
    for i in range(M):
        # per-frame streams keep output independent of processing order
        rng = np.random.default_rng([seed, i])
        frames[i] = render_frame(bounds[i], cfg, noise, rng)
        masks[i] = rasterize_boundaries(bounds[i], cfg)
        if noisy_masks:
            jittered = corrupt_boundaries(bounds[i], cfg, noise.mask_jitter_px, noise.mask_dropout, rng)
            teacher[i] = rasterize_boundaries(jittered, cfg)
    return GroundTruthScan(frames, masks, bounds, ph, cfg, teacher)
