"""Pipeline configuration: TOML in, validated dataclasses out."""

from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .geometry import ScanConfig
from .mesh import GridSpec
from .phantom import NoiseParams, Phantom, Stenosis, coverage_diagnostics
from .sdf import Architecture, TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

STAGES = ("simulate", "extract", "fit", "mesh", "resample", "metrics")


@dataclass(frozen=True)
class ExtractOptions:
    source: str = "mask"
    start_rows: int | None = None
    gap: int = 3
    threshold: float = 0.5
    min_run: int = 3
    median_width: int = 0


@dataclass(frozen=True)
class MeshOptions:
    resolution: int = 192
    lo: float = -1.05
    hi: float = 1.05
    crop_to_scan: bool = True

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.resolution, self.lo, self.hi)


@dataclass(frozen=True)
class MetricOptions:
    emd_cap: int = 256
    cloud_sample: int = 20000


@dataclass(frozen=True)
class Paths:
    out: str = "aoct_run"
    mask_dir: str = ""
    frame_dir: str = ""
    gt_boundaries: str = ""
    gt_mask_dir: str = ""


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    paths: Paths = Paths()
    scan: ScanConfig = ScanConfig()
    phantom: Phantom = Phantom(stenoses=(Stenosis(30.0, 0.4, 3.0),))
    noise: NoiseParams = NoiseParams()
    extract: ExtractOptions = ExtractOptions()
    model: Architecture = Architecture()
    train: TrainConfig = TrainConfig()
    mesh: MeshOptions = MeshOptions()
    resample_eps_hit: float = 1e-4
    metrics: MetricOptions = MetricOptions()
    export_model_json: bool = False

    # ------------------------------------------------------------------ io

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "paths": asdict(self.paths),
            "scan": self.scan.to_dict(),
            "phantom": self.phantom.to_dict(),
            "noise": self.noise.to_dict(),
            "extract": asdict(self.extract),
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "mesh": asdict(self.mesh),
            "resample_eps_hit": self.resample_eps_hit,
            "metrics": asdict(self.metrics),
            "export_model_json": self.export_model_json,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        base = cls()
        kw = {}
        for key in ("seed", "resample_eps_hit", "export_model_json"):
            if key in d:
                kw[key] = d[key]
        simple = {"paths": Paths, "noise": NoiseParams, "extract": ExtractOptions,
                  "train": TrainConfig, "mesh": MeshOptions, "metrics": MetricOptions}
        for key, typ in simple.items():
            if key in d:
                kw[key] = _merge(getattr(base, key), d[key], typ)
        if "scan" in d:
            kw["scan"] = _scan_from(base.scan, d["scan"])
        if "phantom" in d:
            merged = {**base.phantom.to_dict(), **d["phantom"]}
            kw["phantom"] = Phantom.from_dict(merged)
        if "model" in d:
            m = {**base.model.to_dict(), **d["model"]}
            if "width" in m or "depth" in m:
                m["hidden"] = [m.pop("width", 128)] * m.pop("depth", 8)
            m["hidden"] = tuple(m["hidden"])
            kw["model"] = Architecture(**m)
        cfg = replace(base, **kw)
        return cfg.with_seed(cfg.seed)

    @classmethod
    def load(cls, path: str | Path | None) -> "PipelineConfig":
        if path is None:
            return cls()
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))

    def with_seed(self, seed: int) -> "PipelineConfig":
        """The global seed drives every stochastic stage."""
        return replace(self, seed=seed, train=replace(self.train, seed=seed))

    def with_out(self, out: str) -> "PipelineConfig":
        return replace(self, paths=replace(self.paths, out=str(out)))

    def digest(self) -> str:
        """Hash of everything that affects results; the output location does not."""
        d = self.to_dict()
        d["paths"].pop("out")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _merge(base, overrides: dict, typ):
    known = {f.name for f in fields(typ)}
    unknown = set(overrides) - known
    if unknown:
        raise ValueError(f"unknown {typ.__name__} keys: {sorted(unknown)}")
    return replace(base, **overrides)


def _scan_from(base: ScanConfig, d: dict) -> ScanConfig:
    d = dict(d)
    for key in ("phi_cath_deg",):
        if key in d:
            d["phi_cath"] = math.radians(d.pop(key))
    unknown = set(d) - {f.name for f in fields(ScanConfig)}
    if unknown:
        raise ValueError(f"unknown scan keys: {sorted(unknown)}")
    if "f_samp" not in d:
        # keep one revolution per frame unless the rate is given explicitly
        return base.with_(**d)
    return replace(base, **d)


def validate_config(cfg: PipelineConfig, stages=STAGES) -> list[str]:
    """Every problem that would stop the selected stages; empty means runnable."""
    out = [f"scan: {m}" for m in cfg.scan.diagnostics()]
    if "simulate" in stages:
        out += [f"phantom: {m}" for m in cfg.phantom.diagnostics()]
        if not cfg.scan.diagnostics() and not cfg.phantom.diagnostics():
            out += [f"coverage: {m}" for m in coverage_diagnostics(cfg.phantom, cfg.scan)]
    out += [f"train: {m}" for m in cfg.train.diagnostics()]
    out += [f"mesh: {m}" for m in cfg.mesh.grid.diagnostics()]
    if cfg.extract.source not in ("mask", "intensity"):
        out.append(f"extract: source must be 'mask' or 'intensity' (got {cfg.extract.source!r})")
    if cfg.extract.gap < 0:
        out.append("extract: gap must be >= 0")
    if not cfg.resample_eps_hit > 0:
        out.append("resample: eps_hit must be > 0")
    if "extract" in stages and "simulate" not in stages:
        for name in ("mask_dir", "frame_dir"):
            p = getattr(cfg.paths, name)
            if p and not Path(p).is_dir():
                out.append(f"paths: {name} {p!r} does not exist")
    return out
