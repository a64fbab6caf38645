"""Stage runners. Every stage reads and writes documented files under ``paths.out``."""

from __future__ import annotations

import logging
import os
import platform
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import formats as fmt
from .cloud import normalize_pointcloud
from .config import STAGES, PipelineConfig, validate_config
from .extract import (
    boundaries_from_array,
    boundaries_to_array,
    boundary_from_intensity,
    boundary_from_mask,
    pointcloud_from_scan,
)
from .geometry import normalize_intensity, to_cartesian, to_cylindrical
from .mesh import extract_mesh, resample_boundaries, scan_z_range
from .metrics import aline_errors, chamfer, dice, emd, hausdorff, point_to_mesh
from .phantom import rasterize_boundaries, simulate_scan
from .sdf import train

log = logging.getLogger(__name__)

REPORT_SCHEMA = "aoct-metrics v1"
SCAN_SCHEMA = "aoct-scan v1"


class StageError(RuntimeError):
    pass


class MissingInput(StageError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing input {path}; run the '{producer}' stage first")
        self.path = path
        self.producer = producer


class Layout:
    """File locations of every stage product under one output directory."""

    def __init__(self, cfg: PipelineConfig):
        self.root = Path(cfg.paths.out)
        self.scan = self.root / "scan"
        self.frames = Path(cfg.paths.frame_dir) if cfg.paths.frame_dir else self.scan / "frames"
        self.masks = Path(cfg.paths.mask_dir) if cfg.paths.mask_dir else self.scan / "masks"
        self.gt_masks = Path(cfg.paths.gt_mask_dir) if cfg.paths.gt_mask_dir else self.scan / "gt_masks"
        self.gt_boundaries = (Path(cfg.paths.gt_boundaries) if cfg.paths.gt_boundaries
                              else self.scan / "boundaries_gt.csv")
        self.scan_json = self.scan / "scan.json"
        self.boundaries = self.root / "extract" / "boundaries.csv"
        self.cloud = self.root / "extract" / "cloud.ply"
        self.cloud_xyz = self.root / "extract" / "cloud.xyz"
        self.model = self.root / "fit" / "model.bin"
        self.model_json = self.root / "fit" / "model.json"
        self.train_log = self.root / "fit" / "train_log.csv"
        self.mesh_obj = self.root / "mesh" / "mesh.obj"
        self.mesh_ply = self.root / "mesh" / "mesh.ply"
        self.resampled = self.root / "resample" / "boundaries.csv"
        self.report = self.root / "metrics" / "report.json"
        self.report_csv = self.root / "metrics" / "frames.csv"
        self.manifest = self.root / "manifest.json"
        self.lock = self.root / ".aoct.lock"


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingInput(path, producer)
    return path


@contextmanager
def output_lock(lay: Layout):
    lay.root.mkdir(parents=True, exist_ok=True)
    try:
        fd = os.open(lay.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StageError(f"{lay.root} is locked by another run (remove {lay.lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lay.lock.unlink(missing_ok=True)


# --------------------------------------------------------------------------
# stages


def stage_simulate(cfg: PipelineConfig, lay: Layout) -> dict:
    scan = simulate_scan(cfg.phantom, cfg.scan, cfg.noise, cfg.seed)
    for d in (lay.scan / "frames", lay.scan / "masks", lay.scan / "gt_masks"):
        d.mkdir(parents=True, exist_ok=True)
    files = {"frames": [], "masks": [], "gt_masks": []}
    for i in range(cfg.scan.n_frames):
        for key, arr, prefix in (("frames", scan.frames, "frame"),
                                 ("masks", scan.teacher_masks * 255, "mask"),
                                 ("gt_masks", scan.masks * 255, "mask")):
            name = fmt.frame_name(prefix, i)
            fmt.write_pgm(lay.scan / key / name, arr[i].astype(np.uint8))
            files[key].append(f"{key}/{name}")
    gt = boundaries_from_array(scan.boundaries, "truth")
    fmt.write_boundaries(lay.scan / "boundaries_gt.csv", gt, cfg.scan)
    fmt.write_json(lay.scan_json, {
        "format": SCAN_SCHEMA,
        "phantom": cfg.phantom.to_dict(),
        "scan": cfg.scan.to_dict(),
        "noise": cfg.noise.to_dict(),
        "seed": cfg.seed,
        "files": files,
        "boundaries": "boundaries_gt.csv",
    })
    outputs = [lay.scan_json, lay.scan / "boundaries_gt.csv"]
    outputs += [lay.scan / f for group in files.values() for f in group]
    return {"inputs": [], "outputs": outputs, "warnings": []}


def _read_stack(directory: Path, cfg: PipelineConfig, producer: str) -> list[np.ndarray]:
    _require(directory, producer)
    files = fmt.list_frames(directory)
    if len(files) != cfg.scan.n_frames:
        raise StageError(f"{directory} holds {len(files)} images, scan config expects {cfg.scan.n_frames}")
    return files


def stage_extract(cfg: PipelineConfig, lay: Layout) -> dict:
    opts = cfg.extract
    warnings = []
    source_dir = lay.masks if opts.source == "mask" else lay.frames
    files = _read_stack(source_dir, cfg, "simulate")
    bounds = []
    for i, path in enumerate(files):
        img = fmt.read_image(path)
        if opts.source == "mask":
            b = boundary_from_mask(img, cfg.scan, i, opts.start_rows, opts.gap)
        else:
            norm, degenerate = normalize_intensity(img)
            if degenerate:
                warnings.append(f"frame {i}: constant intensity")
            b = boundary_from_intensity(norm, cfg.scan, i, opts.threshold, opts.min_run, opts.median_width)
        missing = int((~b.present).sum())
        if missing:
            warnings.append(f"frame {i}: {missing} columns without a wall")
        bounds.append(b)
    pc = pointcloud_from_scan(bounds, cfg.scan)
    lay.boundaries.parent.mkdir(parents=True, exist_ok=True)
    fmt.write_boundaries(lay.boundaries, bounds, cfg.scan)
    fmt.write_ply_cloud(lay.cloud, pc)
    fmt.write_xyz(lay.cloud_xyz, pc)
    return {"inputs": files, "outputs": [lay.boundaries, lay.cloud, lay.cloud_xyz], "warnings": warnings}


def stage_fit(cfg: PipelineConfig, lay: Layout) -> dict:
    pc = fmt.read_ply_cloud(_require(lay.cloud, "extract"))
    if len(pc) == 0:
        raise StageError(f"{lay.cloud} is empty; nothing to fit")
    unit, tf = normalize_pointcloud(pc)

    def progress(step, loss):
        log.info("fit step %d/%d loss %.4g", step, cfg.train.steps, loss)

    net, tlog = train(unit, cfg.train, cfg.model, tf, progress=progress)
    lay.model.parent.mkdir(parents=True, exist_ok=True)
    fmt.write_model(lay.model, net)
    fmt.write_train_log(lay.train_log, tlog)
    outputs = [lay.model, lay.train_log]
    if cfg.export_model_json:
        fmt.write_json(lay.model_json, fmt.model_to_json(net))
        outputs.append(lay.model_json)
    warnings = [f"{tlog.total_skipped} degenerate-gradient samples skipped"] if tlog.total_skipped else []
    return {"inputs": [lay.cloud], "outputs": outputs, "warnings": warnings}


def stage_mesh(cfg: PipelineConfig, lay: Layout) -> dict:
    net = fmt.read_model(_require(lay.model, "fit"))
    crop = scan_z_range(cfg.scan) if cfg.mesh.crop_to_scan else None
    mesh = extract_mesh(net, cfg.mesh.grid, z_crop=crop)
    lay.mesh_obj.parent.mkdir(parents=True, exist_ok=True)
    fmt.write_obj(lay.mesh_obj, mesh)
    fmt.write_ply_mesh(lay.mesh_ply, mesh)
    return {"inputs": [lay.model], "outputs": [lay.mesh_obj, lay.mesh_ply], "warnings": []}


def stage_resample(cfg: PipelineConfig, lay: Layout) -> dict:
    net = fmt.read_model(_require(lay.model, "fit"))
    bounds = resample_boundaries(net, cfg.scan, cfg.resample_eps_hit)
    lay.resampled.parent.mkdir(parents=True, exist_ok=True)
    fmt.write_boundaries(lay.resampled, bounds, cfg.scan)
    missing = sum(int((~b.present).sum()) for b in bounds)
    warnings = [f"{missing} resampled A-lines missed the surface"] if missing else []
    return {"inputs": [lay.model], "outputs": [lay.resampled], "warnings": warnings}


def _frame_points(b, cfg):
    cols = np.nonzero(b.present)[0]
    fr = np.full(len(cols), b.frame_index)
    return to_cartesian(to_cylindrical(fr, cols, b.d_tiss[cols], cfg))


def _mean_std(values) -> dict:
    v = np.asarray(values, dtype=float)
    return {"mean": float(v.mean()), "std": float(v.std())}


def segmentation_report(gt, pred, cfg: PipelineConfig, scale: float, gt_masks=None) -> tuple[dict, list]:
    """Table-style metrics of predicted boundaries against ground truth."""
    errs = aline_errors(gt, pred)
    pred_by = {b.frame_index: b for b in pred}
    rows = []
    for g in sorted(gt, key=lambda b: b.frame_index):
        p = pred_by[g.frame_index]
        truth_mask = gt_masks[g.frame_index] if gt_masks is not None else rasterize_boundaries(g.d_tiss, cfg.scan)
        row = {"frame": g.frame_index,
               "dice": dice(truth_mask, rasterize_boundaries(p.d_tiss, cfg.scan))}
        if g.present.any() and p.present.any():
            a, b = _frame_points(g, cfg.scan), _frame_points(p, cfg.scan)
            row.update(cd_mm2=chamfer(a, b), hd_mm=hausdorff(a, b),
                       emd_mm=emd(a, b, cfg.metrics.emd_cap, cfg.seed))
        rows.append(row)
    out = {
        "dice": _mean_std([r["dice"] for r in rows]),
        "mu_dist_mm": {"mean": errs["mu_dist_mm"], "std": errs["mu_dist_std_mm"]},
        "max_dist_mm": {"mean": errs["max_dist_mm"], "std": errs["max_dist_std_mm"]},
        "max_dist_overall_mm": errs["max_dist_overall_mm"],
        "coverage_deficit": errs["coverage_deficit"],
    }
    geo = [r for r in rows if "cd_mm2" in r]
    if geo:
        out["cd_mm2"] = _mean_std([r["cd_mm2"] for r in geo])
        out["hd_mm"] = _mean_std([r["hd_mm"] for r in geo])
        out["emd_mm"] = _mean_std([r["emd_mm"] for r in geo])
        out["cd_unit"] = _mean_std([r["cd_mm2"] / scale ** 2 for r in geo])
        out["hd_unit"] = _mean_std([r["hd_mm"] / scale for r in geo])
        out["emd_unit"] = _mean_std([r["emd_mm"] / scale for r in geo])
    per_frame = {f["frame"]: f for f in errs["frames"]}
    for r in rows:
        f = per_frame[r["frame"]]
        r["mu_dist_mm"] = f.get("mu_dist_mm")
        r["max_dist_mm"] = f.get("max_dist_mm")
        r["total_variation_mm"] = f.get("total_variation_pred_mm")
    return out, rows


def stage_metrics(cfg: PipelineConfig, lay: Layout) -> dict:
    inputs = []
    report = {
        "format": REPORT_SCHEMA,
        "conventions": {
            "chamfer": "mean of squared nearest-neighbour distances, summed over both directions",
            "hausdorff": "symmetric, unsquared",
            "emd": f"mean matched Euclidean distance of the optimal assignment on seeded subsamples of at most {cfg.metrics.emd_cap} points",
            "aline": "per-frame mean/max |d_gt - d_pred| over jointly present columns; aggregates are mean and std over frames",
            "units": "mm unless the key ends in _unit (field unit space)",
        },
        "config_sha256": cfg.digest(),
    }
    csv_rows = []
    net = fmt.read_model(lay.model) if lay.model.exists() else None
    scale = net.transform.scale if net is not None else 1.0
    if lay.gt_boundaries.exists():
        gt = fmt.read_boundaries(lay.gt_boundaries)
        inputs.append(lay.gt_boundaries)
        gt_masks = None
        if lay.gt_masks.is_dir():
            files = fmt.list_frames(lay.gt_masks)
            gt_masks = {i: fmt.read_image(p) > 0 for i, p in enumerate(files)}
            inputs += files
        for name, path, producer in (("teacher", lay.boundaries, "extract"),
                                     ("resampled", lay.resampled, "resample")):
            if not path.exists():
                continue
            inputs.append(path)
            summary, rows = segmentation_report(gt, fmt.read_boundaries(path), cfg, scale, gt_masks)
            report[name] = summary
            csv_rows += [{"variant": name, **r} for r in rows]
    if lay.cloud.exists() and lay.mesh_obj.exists():
        pc = fmt.read_ply_cloud(lay.cloud)
        mesh = fmt.read_obj(lay.mesh_obj)
        inputs += [lay.cloud, lay.mesh_obj]
        rng = np.random.default_rng(cfg.seed)
        pts = pc.points
        if len(pts) > cfg.metrics.cloud_sample:
            pts = pts[np.sort(rng.choice(len(pts), cfg.metrics.cloud_sample, replace=False))]
        p2m = point_to_mesh(pts, mesh)
        p2m.pop("distances")
        cd = chamfer(pts, mesh.vertices)
        hd = hausdorff(pts, mesh.vertices)
        em = emd(pts, mesh.vertices, cfg.metrics.emd_cap, cfg.seed)
        report["reconstruction"] = {
            "point_to_mesh_mm": p2m,
            "point_to_mesh_mean_mm": p2m["mean"],
            "cd_mm2": cd, "hd_mm": hd, "emd_mm": em,
            "cd_unit": cd / scale ** 2, "hd_unit": hd / scale, "emd_unit": em / scale,
            "n_points": int(len(pts)),
            "n_triangles": int(len(mesh.triangles)),
        }
    if len(report) == 3:
        raise StageError("nothing to evaluate: need ground-truth boundaries or a cloud and mesh")
    lay.report.parent.mkdir(parents=True, exist_ok=True)
    fmt.write_json(lay.report, report)
    _write_frame_csv(lay.report_csv, csv_rows)
    return {"inputs": inputs, "outputs": [lay.report, lay.report_csv], "warnings": []}


def _write_frame_csv(path: Path, rows: list) -> None:
    cols = ["variant", "frame", "dice", "cd_mm2", "hd_mm", "emd_mm", "mu_dist_mm", "max_dist_mm",
            "total_variation_mm"]
    lines = ["# aoct-frame-metrics v1", ",".join(cols)]
    for r in rows:
        vals = []
        for c in cols:
            v = r.get(c)
            vals.append("" if v is None else (v if isinstance(v, str) else "%.17g" % v))
        lines.append(",".join(str(v) for v in vals))
    path.write_text("\n".join(lines) + "\n")


RUNNERS = {
    "simulate": stage_simulate,
    "extract": stage_extract,
    "fit": stage_fit,
    "mesh": stage_mesh,
    "resample": stage_resample,
    "metrics": stage_metrics,
}


# --------------------------------------------------------------------------
# manifest


def _load_manifest(lay: Layout) -> dict:
    if lay.manifest.exists():
        return fmt.read_json(lay.manifest)
    return {}


def _digests(paths) -> dict:
    return {str(p): fmt.sha256(Path(p)) for p in paths if Path(p).is_file()}


def run_stage(name: str, cfg: PipelineConfig) -> dict:
    """Run one stage and merge its record into the run manifest; returns that record."""
    if name not in RUNNERS:
        raise StageError(f"unknown stage {name!r}; choose from {', '.join(STAGES)}")
    problems = validate_config(cfg, stages=(name,))
    if problems:
        raise StageError("invalid configuration:\n  " + "\n  ".join(problems))
    lay = Layout(cfg)
    with output_lock(lay):
        t0 = time.perf_counter()
        res = RUNNERS[name](cfg, lay)
        record = {
            "wall_clock_s": time.perf_counter() - t0,
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "inputs": _digests(res["inputs"]),
            "outputs": _digests(res["outputs"]),
            "warnings": res["warnings"],
        }
        manifest = _load_manifest(lay)
        manifest.update({
            "tool": "aoct",
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "config": cfg.to_dict(),
            "config_sha256": cfg.digest(),
        })
        manifest.setdefault("stages", {})[name] = record
        fmt.write_json(lay.manifest, manifest)
    for w in res["warnings"][:10]:
        log.warning("%s: %s", name, w)
    return record


def run_pipeline(cfg: PipelineConfig, stages=STAGES) -> dict:
    return {name: run_stage(name, cfg) for name in stages}


def config_from_manifest(path: Path) -> PipelineConfig:
    return PipelineConfig.from_dict(fmt.read_json(path)["config"])
