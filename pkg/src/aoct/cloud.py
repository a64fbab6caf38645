"""Point clouds and the world <-> unit-ball transform used by the field."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import DomainError


@dataclass(frozen=True)
class UnitTransform:
    """``unit = (world - center) / scale``; ``scale`` is mm per unit."""

    center: np.ndarray
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        if not self.scale > 0:
            raise DomainError("scale must be > 0")

    def to_unit(self, p):
        return (np.asarray(p, dtype=float) - self.center) / self.scale

    def to_world(self, u):
        return np.asarray(u, dtype=float) * self.scale + self.center

    @classmethod
    def identity(cls) -> "UnitTransform":
        return cls(np.zeros(3), 1.0)

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "UnitTransform":
        return cls(np.asarray(d["center"]), float(d["scale"]))


@dataclass
class PointCloud:
    """Cartesian wall samples with per-point ``(frame, column)`` provenance.

    ``provenance`` is ``(n, 2)`` int; ``-1`` marks points without scan origin.
    """

    points: np.ndarray
    provenance: np.ndarray = field(default=None)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.provenance is None:
            self.provenance = np.full((len(self.points), 2), -1, dtype=np.int64)
        self.provenance = np.asarray(self.provenance, dtype=np.int64).reshape(-1, 2)
        if len(self.provenance) != len(self.points):
            raise DomainError("provenance length differs from point count")
        if not np.all(np.isfinite(self.points)):
            raise DomainError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.points) == 0:
            raise DomainError("empty point cloud has no bounding box")
        return self.points.min(axis=0), self.points.max(axis=0)

    def transformed(self, fn) -> "PointCloud":
        return PointCloud(fn(self.points), self.provenance.copy())


def normalize_pointcloud(pc: PointCloud, margin: float = 1.05) -> tuple[PointCloud, UnitTransform]:
    """Center on the bounding box and scale into the unit ball (with ``margin``)."""
    if len(pc) < 4:
        raise DomainError("need at least 4 points to normalize")
    lo, hi = pc.bbox
    center = 0.5 * (lo + hi)
    radius = np.sqrt(((pc.points - center) ** 2).sum(axis=1)).max()
    if not radius > 0:
        raise DomainError("degenerate point cloud (all points coincide)")
    tf = UnitTransform(center, float(radius * margin))
    return pc.transformed(tf.to_unit), tf
