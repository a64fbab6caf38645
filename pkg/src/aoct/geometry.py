"""Helical pull-back geometry: scan parameters, A-line poses and coordinate maps.

Conventions used throughout the package:

* Rectangular frames are stored as ``(H, N)`` arrays: row ``k`` is line-of-sight
  distance ``k * d_max / H`` and column ``j`` is one A-line.
* A-line ``(i, j)`` is acquired at ``t = (i*N + j) / f_samp``.
* The catheter runs along the z axis. Cartesian points use ``x = r*sin(theta)``,
  ``y = r*cos(theta)`` (note: sine on x), and ``z = z_cath - d*cos(phi)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

TWO_PI = 2.0 * math.pi


class DomainError(ValueError):
    """Raised when an input violates an operation's domain."""


@dataclass(frozen=True)
class ScanConfig:
    """Physical parameters of one pull-back scan.

    Units: mm, s, rad. ``f_samp`` is the A-line rate; one frame is one
    revolution, so ``n_columns == 2*pi*f_samp/omega``.
    """

    v_cath: float = 0.5
    omega: float = TWO_PI
    phi_cath: float = math.pi / 2
    f_samp: float = 1024.0
    n_columns: int = 1024
    n_frames: int = 100
    d_max: float = 6.0
    frame_height: int = 1024
    z_start: float = 5.0
    pullback_sign: int = 1
    theta_offset: float = 0.0

    @property
    def pixel_size(self) -> float:
        """Line-of-sight size of one frame row in mm."""
        return self.d_max / self.frame_height

    @property
    def duration(self) -> float:
        return self.n_frames * self.n_columns / self.f_samp

    def diagnostics(self) -> list[str]:
        out = []
        for name in ("v_cath", "omega", "f_samp", "d_max"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be > 0 (got {getattr(self, name)})")
        if self.n_columns < 4:
            out.append(f"n_columns must be >= 4 (got {self.n_columns})")
        if self.frame_height < 4:
            out.append(f"frame_height must be >= 4 (got {self.frame_height})")
        if self.n_frames < 1:
            out.append(f"n_frames must be >= 1 (got {self.n_frames})")
        if not 0.0 < self.phi_cath < math.pi:
            out.append(f"phi_cath must lie in (0, pi) (got {self.phi_cath})")
        if self.pullback_sign not in (1, -1):
            out.append(f"pullback_sign must be +1 or -1 (got {self.pullback_sign})")
        if self.omega > 0 and self.f_samp > 0:
            per_rev = TWO_PI * self.f_samp / self.omega
            if self.n_columns != round(per_rev) or abs(
                self.n_columns * self.omega / (TWO_PI * self.f_samp) - 1.0
            ) >= 1e-9:
                out.append(
                    "n_columns must equal 2*pi*f_samp/omega (one frame per revolution); "
                    f"got n_columns={self.n_columns}, 2*pi*f_samp/omega={per_rev:.9g}"
                )
        return out

    def validate(self) -> "ScanConfig":
        problems = self.diagnostics()
        if problems:
            raise DomainError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScanConfig":
        return cls(**d)

    def with_(self, **kw) -> "ScanConfig":
        """Copy with fields replaced; keeps ``f_samp`` consistent if only N or omega change."""
        if ("n_columns" in kw or "omega" in kw) and "f_samp" not in kw:
            n = kw.get("n_columns", self.n_columns)
            w = kw.get("omega", self.omega)
            kw["f_samp"] = n * w / TWO_PI
        return replace(self, **kw)


@dataclass(frozen=True)
class ALineSample:
    frame_index: int
    column_index: int
    d_tiss: Optional[float] = None


class CylPoint(NamedTuple):
    r_tiss: float
    theta: float
    z_tiss: float


def _check_indices(frame, column, cfg: ScanConfig):
    frame = np.asarray(frame)
    column = np.asarray(column)
    if np.any(frame < 0) or np.any(frame >= cfg.n_frames):
        raise DomainError(f"frame index out of range [0, {cfg.n_frames})")
    if np.any(column < 0) or np.any(column >= cfg.n_columns):
        raise DomainError(f"column index out of range [0, {cfg.n_columns})")
    return frame, column


def sample_time(frame, column, cfg: ScanConfig):
    """Acquisition time (s) of A-line ``(frame, column)``; vectorized over indices."""
    frame, column = _check_indices(frame, column, cfg)
    t = (frame.astype(np.int64) * cfg.n_columns + column) / cfg.f_samp
    return float(t) if t.ndim == 0 else t


def aline_pose(t, cfg: ScanConfig):
    """Return ``(theta, z_cath)`` of the beam at time ``t``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("t must be >= 0")
    theta = np.mod(cfg.omega * t + cfg.theta_offset, TWO_PI)
    z_cath = cfg.z_start + cfg.pullback_sign * cfg.v_cath * t
    if theta.ndim == 0:
        return float(theta), float(z_cath)
    return theta, z_cath


def beam_direction(theta, phi_cath: float) -> np.ndarray:
    """Unit ray direction(s) for rotation angle ``theta``; shape ``(..., 3)``."""
    theta = np.asarray(theta, dtype=float)
    s = math.sin(phi_cath)
    return np.stack(
        [s * np.sin(theta), s * np.cos(theta), np.full_like(theta, -math.cos(phi_cath))],
        axis=-1,
    )


def to_cylindrical(frame, column, d_tiss, cfg: ScanConfig) -> CylPoint:
    """Cylindrical wall coordinates of A-line hits.

    ``d_tiss`` may be NaN (scalar or array) to mean "no wall"; a scalar NaN
    raises, array entries propagate NaN.
    """
    d = np.asarray(d_tiss, dtype=float)
    if d.ndim == 0 and not np.isfinite(d):
        raise DomainError("no wall detected on this A-line")
    if np.any(d < 0) or np.any(d > cfg.d_max):
        raise DomainError(f"d_tiss outside [0, {cfg.d_max}]")
    t = sample_time(frame, column, cfg)
    theta, z_cath = aline_pose(t, cfg)
    r = d * math.sin(cfg.phi_cath)
    z = z_cath - d * math.cos(cfg.phi_cath)
    if d.ndim == 0:
        return CylPoint(float(r), theta, float(z))
    return CylPoint(r, theta, z)


def sample_to_cylindrical(sample: ALineSample, cfg: ScanConfig) -> CylPoint:
    if sample.d_tiss is None:
        raise DomainError("no wall detected on this A-line")
    return to_cylindrical(sample.frame_index, sample.column_index, sample.d_tiss, cfg)


def to_cartesian(cyl: CylPoint) -> np.ndarray:
    r, theta, z = (np.asarray(v, dtype=float) for v in cyl)
    return np.stack(np.broadcast_arrays(r * np.sin(theta), r * np.cos(theta), z), axis=-1)


def from_cartesian(p) -> CylPoint:
    """Inverse of :func:`to_cartesian` (theta in ``[0, 2*pi)``)."""
    p = np.asarray(p, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    theta = np.mod(np.arctan2(x, y), TWO_PI)
    return CylPoint(np.hypot(x, y), theta, z)


def normalize_intensity(frame) -> tuple[np.ndarray, bool]:
    """Clamp a frame to ``[mu - sigma, mu + sigma]`` and min-max rescale to ``[0, 1]``.

    Returns the normalized frame and a flag that is True for degenerate
    (constant) frames, which map to all zeros.
    """
    f = np.asarray(frame, dtype=float)
    if f.size == 0:
        raise DomainError("empty frame")
    mu = f.mean()
    sigma = f.std()
    if sigma == 0:
        return np.zeros_like(f), True
    c = np.clip(f, mu - sigma, mu + sigma)
    lo, hi = c.min(), c.max()
    if hi <= lo:
        return np.zeros_like(f), True
    return (c - lo) / (hi - lo), False
