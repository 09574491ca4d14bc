"""Dataset I/O: TUM trajectories, 16-bit PGM depth, PLY clouds, JSONL detections.

All formats are documented in the README. Loaders are pure given a path and
safe for concurrent use on distinct files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ExportError, FormatError, ParseError, ValidationError
from .geometry import PointCloud, Pose, Trajectory


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole model: pixel (u, v) at depth z maps to (z(u-cx)/fx, z(v-cy)/fy, z)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 0.001  # meters per raw depth unit

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point outside image bounds")

    def project(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame points (N, 3) to pixel coordinates (N, 2). z must be > 0."""
        pts = np.asarray(points, dtype=np.float64)
        u = pts[:, 0] / pts[:, 2] * self.fx + self.cx
        v = pts[:, 1] / pts[:, 2] * self.fy + self.cy
        return np.stack([u, v], axis=1)


@dataclass(frozen=True)
class Detection:
    """One 2D object proposal: class, confidence score in [0, 1], pixel bbox."""

    keyframe_id: int
    class_id: int
    class_name: str
    score: float
    bbox: tuple  # (xmin, ymin, xmax, ymax)

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score {self.score} outside [0, 1]")
        xmin, ymin, xmax, ymax = self.bbox
        if not (xmin < xmax and ymin < ymax):
            raise ValidationError(f"inverted bbox {self.bbox}")
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))


@dataclass
class KeyframeRecord:
    """Everything the pipeline needs for one keyframe."""

    keyframe_id: int
    pose: Pose
    cloud: PointCloud  # camera frame, organized
    detections: List[Detection] = field(default_factory=list)

    def __post_init__(self):
        for det in self.detections:
            if det.keyframe_id != self.keyframe_id:
                raise ValidationError(
                    f"detection for keyframe {det.keyframe_id} "
                    f"attached to keyframe {self.keyframe_id}"
                )


# ---------------------------------------------------------------------------
# TUM trajectories
# ---------------------------------------------------------------------------

def load_trajectory(path) -> Trajectory:
    """Parse TUM lines "timestamp tx ty tz qx qy qz qw"; '#' comments skipped.

    Keyframe ids are assigned by data-line ordinal. Quaternions off unit norm
    by more than 1e-3 are rejected; smaller deviations are renormalized.
    """
    entries = {}
    keyframe_id = 0
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 8:
                raise ParseError(
                    f"{path}:{lineno}: expected 8 fields, got {len(fields)}"
                )
            try:
                t, tx, ty, tz, qx, qy, qz, qw = (float(v) for v in fields)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            norm = np.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
            if abs(norm - 1.0) > 1e-3:
                raise ParseError(
                    f"{path}:{lineno}: quaternion norm {norm:.6f} too far from 1"
                )
            pose = Pose.from_quaternion(
                qx / norm, qy / norm, qz / norm, qw / norm, (tx, ty, tz)
            )
            entries[keyframe_id] = (t, pose)
            keyframe_id += 1
    return Trajectory(entries)


def save_trajectory(path, trajectory: Trajectory) -> None:
    """Write TUM format with 9 significant digits per value."""
    with open(path, "w") as fh:
        for kf in trajectory.keyframe_ids():
            t = trajectory.timestamp(kf)
            pose = trajectory.pose(kf)
            tx, ty, tz = pose.translation
            qx, qy, qz, qw = pose.to_quaternion()
            vals = (t, tx, ty, tz, qx, qy, qz, qw)
            fh.write(" ".join(f"{v:.9g}" for v in vals) + "\n")


# ---------------------------------------------------------------------------
# 16-bit PGM depth rasters
# ---------------------------------------------------------------------------

def _read_pgm_header(fh, path):
    def next_token():
        tok = b""
        while True:
            ch = fh.read(1)
            if not ch:
                raise FormatError(f"{path}: truncated header")
            if ch in b" \t\r\n":
                if tok:
                    return tok
                continue
            if ch == b"#":
                while fh.read(1) not in (b"\n", b""):
                    pass
                continue
            tok += ch

    magic = next_token()
    if magic != b"P5":
        raise FormatError(f"{path}: bad magic {magic!r}, expected P5")
    width = int(next_token())
    height = int(next_token())
    maxval = int(next_token())
    return width, height, maxval


def load_depth_raster(path) -> np.ndarray:
    """Read a 16-bit binary PGM into a (height, width) uint16 array."""
    with open(path, "rb") as fh:
        width, height, maxval = _read_pgm_header(fh, path)
        if maxval != 65535:
            raise FormatError(f"{path}: maxval {maxval}, expected 65535")
        data = fh.read(width * height * 2)
    if len(data) != width * height * 2:
        raise FormatError(f"{path}: truncated pixel data")
    # PGM stores 16-bit samples most significant byte first.
    return np.frombuffer(data, dtype=">u2").reshape(height, width).astype(np.uint16)


def save_depth_raster(path, raster: np.ndarray) -> None:
    arr = np.asarray(raster)
    if arr.ndim != 2:
        raise ValidationError(f"depth raster must be 2D, got shape {arr.shape}")
    height, width = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n65535\n".encode("ascii"))
        fh.write(arr.astype(">u2").tobytes())


def load_depth_frame(path, intrinsics: CameraIntrinsics) -> PointCloud:
    """Back-project a PGM depth raster into an organized camera-frame cloud.

    Zero-depth pixels are skipped; remaining points keep raster order, and
    organized_shape records the raster dimensions.
    """
    raster = load_depth_raster(path)
    height, width = raster.shape
    if (width, height) != (intrinsics.width, intrinsics.height):
        raise FormatError(
            f"{path}: raster {width}x{height} does not match "
            f"intrinsics {intrinsics.width}x{intrinsics.height}"
        )
    return backproject(raster, intrinsics)


def backproject(raster: np.ndarray, intrinsics: CameraIntrinsics) -> PointCloud:
    height, width = raster.shape
    v, u = np.nonzero(raster)
    z = raster[v, u].astype(np.float64) * intrinsics.depth_scale
    x = z * (u - intrinsics.cx) / intrinsics.fx
    y = z * (v - intrinsics.cy) / intrinsics.fy
    return PointCloud(
        points=np.stack([x, y, z], axis=1),
        organized_shape=(width, height),
    )


# ---------------------------------------------------------------------------
# PLY point clouds
# ---------------------------------------------------------------------------

_PLY_PROPS = {
    "x": ("f4", float), "y": ("f4", float), "z": ("f4", float),
    "nx": ("f4", float), "ny": ("f4", float), "nz": ("f4", float),
    "red": ("u1", int), "green": ("u1", int), "blue": ("u1", int),
    "class_id": ("i4", int), "object_id": ("i4", int),
}
_PLY_TYPE_NAMES = {"f4": "float", "u1": "uchar", "i4": "int"}
_PLY_TYPE_BY_NAME = {
    "float": "f4", "float32": "f4",
    "uchar": "u1", "uint8": "u1",
    "int": "i4", "int32": "i4",
}


def load_point_cloud(path, with_attrs: bool = False):
    """Read a PLY cloud (ascii or binary_little_endian).

    Supported vertex properties: x y z, nx ny nz, red green blue, class_id,
    object_id. Anything else raises FormatError naming the property. Returns
    the cloud, or (cloud, extra_attrs) when with_attrs is set.
    """
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise FormatError(f"{path}: missing ply magic")
        fmt = None
        elements = []  # (name, count, [(prop, dtype)])
        while True:
            line = fh.readline()
            if not line:
                raise FormatError(f"{path}: unterminated header")
            tokens = line.decode("ascii", "replace").split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                if tokens[1] not in ("ascii", "binary_little_endian"):
                    raise FormatError(f"{path}: unsupported format {tokens[1]}")
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if not elements:
                    raise FormatError(f"{path}: property before element")
                if tokens[1] == "list":
                    elements[-1][2].append((tokens[-1], "list"))
                    continue
                tname, pname = tokens[1], tokens[2]
                elements[-1][2].append((pname, _PLY_TYPE_BY_NAME.get(tname)))
            elif tokens[0] == "end_header":
                break
        if fmt is None:
            raise FormatError(f"{path}: no format line")

        data = {}
        for name, count, props in elements:
            if name != "vertex":
                if count > 0:
                    raise FormatError(f"{path}: unsupported element {name}")
                continue
            for pname, dt in props:
                if pname not in _PLY_PROPS or dt != _PLY_PROPS[pname][0]:
                    raise FormatError(f"{path}: unsupported property {pname}")
            pnames = [p for p, _ in props]
            if fmt == "binary_little_endian":
                dtype = np.dtype([(p, "<" + _PLY_PROPS[p][0]) for p in pnames])
                raw = fh.read(dtype.itemsize * count)
                if len(raw) != dtype.itemsize * count:
                    raise FormatError(f"{path}: truncated vertex data")
                rec = np.frombuffer(raw, dtype=dtype)
                for p in pnames:
                    data[p] = rec[p].copy()
            else:
                rows = []
                for _ in range(count):
                    line = fh.readline().decode("ascii").split()
                    if len(line) != len(pnames):
                        raise FormatError(f"{path}: bad vertex line")
                    rows.append([float(v) for v in line])
                arr = np.asarray(rows, dtype=np.float64).reshape(count, len(pnames))
                for k, p in enumerate(pnames):
                    data[p] = arr[:, k].astype(_PLY_PROPS[p][0])

    for coord in ("x", "y", "z"):
        if coord not in data:
            raise FormatError(f"{path}: missing {coord} property")
    n = len(data["x"])
    points = np.stack(
        [data["x"], data["y"], data["z"]], axis=1
    ).astype(np.float64)
    colors = None
    if all(c in data for c in ("red", "green", "blue")):
        colors = np.stack([data["red"], data["green"], data["blue"]], axis=1)
    normals = None
    if all(c in data for c in ("nx", "ny", "nz")):
        normals = np.stack([data["nx"], data["ny"], data["nz"]], axis=1)
        normals = normals.astype(np.float64)
        lengths = np.linalg.norm(normals, axis=1)
        normals /= np.maximum(lengths, 1e-300)[:, None]
    cloud = PointCloud(points=points, colors=colors, normals=normals)
    if not with_attrs:
        return cloud
    extra = {
        k: data[k].astype(np.int32)
        for k in ("class_id", "object_id") if k in data
    }
    return cloud, extra


def save_point_cloud(path, cloud: PointCloud, extra_attrs: Optional[dict] = None,
                     binary: bool = True) -> None:
    """Write a PLY cloud; extra_attrs may carry int32 class_id / object_id."""
    extra_attrs = extra_attrs or {}
    n = len(cloud)
    columns = [("x", cloud.points[:, 0]), ("y", cloud.points[:, 1]),
               ("z", cloud.points[:, 2])]
    if cloud.normals is not None:
        for k, name in enumerate(("nx", "ny", "nz")):
            columns.append((name, cloud.normals[:, k]))
    if cloud.colors is not None:
        for k, name in enumerate(("red", "green", "blue")):
            columns.append((name, cloud.colors[:, k]))
    for name in ("class_id", "object_id"):
        if name in extra_attrs:
            vals = np.asarray(extra_attrs[name], dtype=np.int32)
            if len(vals) != n:
                raise ValidationError(f"{name} has {len(vals)} values for {n} points")
            columns.append((name, vals))

    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {n}")
    for name, _ in columns:
        header.append(f"property {_PLY_TYPE_NAMES[_PLY_PROPS[name][0]]} {name}")
    header.append("end_header")

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            dtype = np.dtype([(name, "<" + _PLY_PROPS[name][0]) for name, _ in columns])
            rec = np.zeros(n, dtype=dtype)
            for name, vals in columns:
                rec[name] = vals
            fh.write(rec.tobytes())
        else:
            casts = [
                (vals.astype(np.float32) if _PLY_PROPS[name][0] == "f4"
                 else vals.astype(np.int64))
                for name, vals in columns
            ]
            for i in range(n):
                fields = []
                for (name, _), cast in zip(columns, casts):
                    v = cast[i]
                    fields.append(f"{v:.9g}" if _PLY_PROPS[name][0] == "f4" else str(int(v)))
                fh.write((" ".join(fields) + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# Detection streams (JSON Lines)
# ---------------------------------------------------------------------------

_DETECTION_KEYS = {"keyframe_id", "class_id", "class_name", "score", "bbox"}


def load_detections(path) -> List[Detection]:
    """Read one Detection per JSONL line, sorted by keyframe id.

    Input order is preserved within a keyframe.
    """
    detections = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            missing = _DETECTION_KEYS - obj.keys()
            if missing:
                raise ValidationError(
                    f"{path}:{lineno}: missing keys {sorted(missing)}"
                )
            try:
                det = Detection(
                    keyframe_id=int(obj["keyframe_id"]),
                    class_id=int(obj["class_id"]),
                    class_name=str(obj["class_name"]),
                    score=float(obj["score"]),
                    bbox=tuple(obj["bbox"]),
                )
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            detections.append(det)
    detections.sort(key=lambda d: d.keyframe_id)  # stable: keeps in-frame order
    return detections


def save_detections(path, detections: List[Detection]) -> None:
    with open(path, "w") as fh:
        for det in detections:
            fh.write(json.dumps({
                "keyframe_id": det.keyframe_id,
                "class_id": det.class_id,
                "class_name": det.class_name,
                "score": det.score,
                "bbox": list(det.bbox),
            }, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Intrinsics and inventory JSON
# ---------------------------------------------------------------------------

def load_intrinsics(path) -> CameraIntrinsics:
    with open(path, "r") as fh:
        obj = json.load(fh)
    try:
        return CameraIntrinsics(
            fx=float(obj["fx"]), fy=float(obj["fy"]),
            cx=float(obj["cx"]), cy=float(obj["cy"]),
            width=int(obj["width"]), height=int(obj["height"]),
            depth_scale=float(obj.get("depth_scale", 0.001)),
        )
    except KeyError as exc:
        raise ValidationError(f"{path}: missing intrinsics key {exc}") from None


def save_intrinsics(path, intrinsics: CameraIntrinsics) -> None:
    with open(path, "w") as fh:
        json.dump({
            "fx": intrinsics.fx, "fy": intrinsics.fy,
            "cx": intrinsics.cx, "cy": intrinsics.cy,
            "width": intrinsics.width, "height": intrinsics.height,
            "depth_scale": intrinsics.depth_scale,
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")


def export_inventory(semantic_map, path) -> None:
    """Write the object inventory: per-object summary plus per-class counts."""
    objects = []
    class_counts = {}
    for lm_id in sorted(semantic_map.landmarks):
        lm = semantic_map.landmarks[lm_id]
        _, class_name = semantic_map.registry.label_of(lm)
        centroid = lm.model_centroid
        objects.append({
            "object_id": lm_id,
            "class_name": class_name,
            "confidence": lm.confidence(),
            "n_observations": lm.n,
            "centroid": [float(c) for c in centroid],
            "point_count": len(lm.model),
        })
        class_counts[class_name] = class_counts.get(class_name, 0) + 1
    doc = {"objects": objects, "class_counts": class_counts}
    try:
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise ExportError(f"inventory export to {path} failed: {exc}") from exc
