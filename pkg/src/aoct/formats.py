"""On-disk formats shared by the pipeline stages.

All text outputs use ``%.17g`` floats so they round-trip exactly and stay
byte-identical across runs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .cloud import PointCloud, UnitTransform
from .extract import ALineBoundary
from .geometry import ScanConfig, sample_time
from .mesh import TriangleMesh
from .sdf import Architecture, MlpSdf

BOUNDARY_SCHEMA = "# aoct-boundaries v1"
LOG_SCHEMA = "# aoct-trainlog v1"
MODEL_MAGIC = b"AOCTSDF\x00"
MODEL_VERSION = 1


def _g(x: float) -> str:
    return "%.17g" % x


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: Path):
    return json.loads(Path(path).read_text())


# --------------------------------------------------------------------------
# images


def write_pgm(path: Path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError("PGM writer expects uint8 data")
    Image.fromarray(img).save(path, format="PPM")


def read_image(path: Path) -> np.ndarray:
    """8-bit grayscale PGM/PNG as a ``uint8`` array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def frame_name(prefix: str, i: int) -> str:
    return f"{prefix}_{i:05d}.pgm"


def list_frames(directory: Path) -> list[Path]:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".pgm", ".png"))
    return files


# --------------------------------------------------------------------------
# boundaries CSV


def write_boundaries(path: Path, boundaries: Iterable[ALineBoundary], cfg: ScanConfig) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(BOUNDARY_SCHEMA + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "column", "t", "d_tiss_mm", "source", "low_confidence"])
        for b in sorted(boundaries, key=lambda b: b.frame_index):
            t = sample_time(np.full(len(b.d_tiss), b.frame_index), np.arange(len(b.d_tiss)), cfg)
            for j, d in enumerate(b.d_tiss):
                w.writerow([b.frame_index, j, _g(t[j]), "" if np.isnan(d) else _g(d),
                            b.source, int(b.low_confidence[j])])


def read_boundaries(path: Path) -> list[ALineBoundary]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != BOUNDARY_SCHEMA:
            raise ValueError(f"{path}: not an aoct boundary file (header {first!r})")
        rows = list(csv.DictReader(fh))
    by_frame: dict[int, list] = {}
    for r in rows:
        by_frame.setdefault(int(r["frame"]), []).append(r)
    out = []
    for f in sorted(by_frame):
        rs = sorted(by_frame[f], key=lambda r: int(r["column"]))
        d = np.array([float(r["d_tiss_mm"]) if r["d_tiss_mm"] else np.nan for r in rs])
        low = np.array([r.get("low_confidence", "0") == "1" for r in rs])
        out.append(ALineBoundary(f, d, rs[0]["source"], low))
    return out


# --------------------------------------------------------------------------
# point clouds


def write_ply_cloud(path: Path, pc: PointCloud) -> None:
    lines = [
        "ply",
        "format ascii 1.0",
        "comment aoct pointcloud v1",
        f"element vertex {len(pc)}",
        "property double x",
        "property double y",
        "property double z",
        "property int frame",
        "property int column",
        "end_header",
    ]
    body = [
        f"{_g(p[0])} {_g(p[1])} {_g(p[2])} {int(f)} {int(c)}"
        for p, (f, c) in zip(pc.points, pc.provenance)
    ]
    Path(path).write_text("\n".join(lines + body) + "\n")


def read_ply_cloud(path: Path) -> PointCloud:
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        props = []
        n = 0
        for line in fh:
            line = line.strip()
            if line.startswith("format") and "ascii" not in line:
                raise ValueError(f"{path}: only ASCII point cloud PLY is supported")
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("property"):
                props.append(line.split()[-1])
            elif line == "end_header":
                break
        data = np.loadtxt(fh, ndmin=2) if n else np.zeros((0, len(props)))
    data = data.reshape(n, len(props))
    pts = data[:, [props.index(k) for k in ("x", "y", "z")]]
    if "frame" in props and "column" in props:
        prov = data[:, [props.index("frame"), props.index("column")]].astype(np.int64)
    else:
        prov = None
    return PointCloud(pts, prov)


def write_xyz(path: Path, pc: PointCloud) -> None:
    Path(path).write_text("".join(f"{_g(p[0])} {_g(p[1])} {_g(p[2])}\n" for p in pc.points))


# --------------------------------------------------------------------------
# meshes


def write_obj(path: Path, mesh: TriangleMesh) -> None:
    out = ["# aoct mesh v1"]
    out += [f"v {_g(v[0])} {_g(v[1])} {_g(v[2])}" for v in mesh.vertices]
    out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(out) + "\n")


def read_obj(path: Path) -> TriangleMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_ply_mesh(path: Path, mesh: TriangleMesh) -> None:
    """Binary little-endian PLY: double vertices, int32 triangle indices."""
    header = (
        "ply\nformat binary_little_endian 1.0\ncomment aoct mesh v1\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    faces = np.zeros(len(mesh.triangles), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    faces["n"] = 3
    faces["idx"] = mesh.triangles
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
        fh.write(faces.tobytes())


def read_ply_mesh(path: Path) -> TriangleMesh:
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    nv = int(next(h for h in header if h.startswith("element vertex")).split()[-1])
    nf = int(next(h for h in header if h.startswith("element face")).split()[-1])
    verts = np.frombuffer(raw, dtype="<f8", count=3 * nv, offset=end).reshape(nv, 3)
    faces = np.frombuffer(raw, dtype=[("n", "u1"), ("idx", "<i4", (3,))], count=nf,
                          offset=end + 24 * nv)
    return TriangleMesh(verts.copy(), faces["idx"].astype(np.int64))


# --------------------------------------------------------------------------
# model


def write_model(path: Path, net: MlpSdf) -> None:
    """Binary field: magic, version, JSON descriptor, float64 LE parameters, transform."""
    desc = json.dumps({"architecture": net.arch.to_dict(),
                       "shapes": [list(p.shape) for p in net.params]}, sort_keys=True).encode()
    flat = net.flat_params().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", MODEL_VERSION))
        fh.write(struct.pack("<I", len(desc)))
        fh.write(desc)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())
        fh.write(np.asarray([*net.transform.center, net.transform.scale], dtype="<f8").tobytes())


def read_model(path: Path) -> MlpSdf:
    raw = Path(path).read_bytes()
    if raw[:8] != MODEL_MAGIC:
        raise ValueError(f"{path}: not an aoct model file")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    (n_desc,) = struct.unpack_from("<I", raw, 12)
    desc = json.loads(raw[16:16 + n_desc])
    off = 16 + n_desc
    (n,) = struct.unpack_from("<Q", raw, off)
    off += 8
    flat = np.frombuffer(raw, dtype="<f8", count=n, offset=off)
    off += 8 * n
    tf = np.frombuffer(raw, dtype="<f8", count=4, offset=off)
    a = desc["architecture"]
    arch = Architecture(tuple(a["hidden"]), a["skip"], a["activation"], a["beta"])
    params, i = [], 0
    for shape in desc["shapes"]:
        size = int(np.prod(shape))
        params.append(flat[i:i + size].reshape(shape).copy())
        i += size
    return MlpSdf(arch, params, UnitTransform(tf[:3], float(tf[3])))


def model_to_json(net: MlpSdf) -> dict:
    return {
        "format": "aoct-sdf",
        "version": MODEL_VERSION,
        "architecture": net.arch.to_dict(),
        "transform": net.transform.to_dict(),
        "params": [p.tolist() for p in net.params],
    }


def model_from_json(d: dict) -> MlpSdf:
    a = d["architecture"]
    arch = Architecture(tuple(a["hidden"]), a["skip"], a["activation"], a["beta"])
    return MlpSdf(arch, [np.array(p) for p in d["params"]], UnitTransform.from_dict(d["transform"]))


def write_train_log(path: Path, tlog) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(LOG_SCHEMA + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr", "skipped"])
        for row in zip(tlog.steps, tlog.loss, tlog.lr, tlog.skipped):
            w.writerow([row[0], _g(row[1]), _g(row[2]), row[3]])
