"""Synthetic scenes: analytic primitives, depth rendering, simulated
detections, and inventory scoring against ground truth.

Scenes are JSON documents describing supporting planes, primitive objects
(box, sphere, cylinder), a camera trajectory, and detector noise. Rendering
ray-casts every pixel against every primitive, so depth, labels, and boxes
are exact up to millimeter quantization.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .errors import ValidationError
from .frameio import (CameraIntrinsics, Detection, save_depth_raster,
                      save_detections, save_intrinsics, save_trajectory)
from .geometry import Pose, Trajectory

_EPS = 1e-9


def _rot_z(yaw_deg: float) -> np.ndarray:
    a = math.radians(yaw_deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _frame_from_normal(normal: np.ndarray) -> np.ndarray:
    """Orthonormal basis whose third column is the given unit normal."""
    n = normal / np.linalg.norm(normal)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(n @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    u = np.cross(n, ref)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    return np.stack([u, v, n], axis=1)


@dataclass
class PlaneSpec:
    center: np.ndarray
    normal: np.ndarray
    extent: Tuple[float, float]

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        basis = _frame_from_normal(self.normal)
        o = basis.T @ (origin - self.center)
        d = dirs @ basis
        dz = np.where(np.abs(d[:, 2]) < _EPS, _EPS, d[:, 2])
        t = -o[2] / dz
        px = o[0] + t * d[:, 0]
        py = o[1] + t * d[:, 1]
        hit = ((t > _EPS) & (np.abs(px) <= self.extent[0] / 2)
               & (np.abs(py) <= self.extent[1] / 2))
        return np.where(hit, t, np.inf)


@dataclass
class ObjectSpec:
    class_name: str
    primitive: str               # box | sphere | cylinder
    center: np.ndarray
    size: Optional[np.ndarray] = None    # box full extents
    radius: Optional[float] = None       # sphere / cylinder
    height: Optional[float] = None       # cylinder
    yaw_deg: float = 0.0

    def __post_init__(self):
        if self.primitive not in ("box", "sphere", "cylinder"):
            raise ValidationError(f"unknown primitive {self.primitive!r}")
        if self.primitive == "box" and self.size is None:
            raise ValidationError("box needs a size")
        if self.primitive in ("sphere", "cylinder") and not self.radius:
            raise ValidationError(f"{self.primitive} needs a radius")
        if self.primitive == "cylinder" and not self.height:
            raise ValidationError("cylinder needs a height")

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        if self.primitive == "sphere":
            return self._intersect_sphere(origin, dirs)
        rot = _rot_z(self.yaw_deg)
        o = rot.T @ (origin - self.center)
        d = dirs @ rot
        if self.primitive == "box":
            return self._intersect_box(o, d)
        return self._intersect_cylinder(o, d)

    def _intersect_sphere(self, origin, dirs):
        oc = origin - self.center
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2.0 * dirs @ oc
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4 * a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t = (-b - sq) / (2 * a)
        return np.where(ok & (t > _EPS), t, np.inf)

    def _intersect_box(self, o, d):
        half = np.asarray(self.size, dtype=np.float64) / 2.0
        d_safe = np.where(np.abs(d) < _EPS, _EPS, d)
        t1 = (-half - o) / d_safe
        t2 = (half - o) / d_safe
        tmin = np.minimum(t1, t2).max(axis=1)
        tmax = np.maximum(t1, t2).min(axis=1)
        hit = (tmax >= tmin) & (tmin > _EPS)
        return np.where(hit, tmin, np.inf)

    def _intersect_cylinder(self, o, d):
        r = self.radius
        hh = self.height / 2.0
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = 2.0 * (o[0] * d[:, 0] + o[1] * d[:, 1])
        c = o[0] ** 2 + o[1] ** 2 - r * r
        disc = b * b - 4 * a * c
        ok = (disc >= 0) & (a > _EPS)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        a_safe = np.where(a > _EPS, a, 1.0)
        t_side = np.where(ok, (-b - sq) / (2 * a_safe), np.inf)
        z_side = o[2] + t_side * d[:, 2]
        t_side = np.where((t_side > _EPS) & (np.abs(z_side) <= hh), t_side, np.inf)

        best = t_side
        dz = np.where(np.abs(d[:, 2]) < _EPS, _EPS, d[:, 2])
        for cap_z in (-hh, hh):
            t_cap = (cap_z - o[2]) / dz
            px = o[0] + t_cap * d[:, 0]
            py = o[1] + t_cap * d[:, 1]
            inside = (t_cap > _EPS) & (px * px + py * py <= r * r)
            best = np.minimum(best, np.where(inside, t_cap, np.inf))
        return best


@dataclass
class DetectorSpec:
    dropout: float = 0.0
    bbox_jitter_px: float = 0.0
    bbox_pad_px: float = 0.0   # loose boxes: grow the true bbox by this margin
    score_range: Tuple[float, float] = (0.7, 1.0)
    min_visible_px: int = 50


@dataclass
class SceneSpec:
    """Everything needed to render a dataset: geometry, camera, detector."""

    seed: int
    intrinsics: CameraIntrinsics
    planes: List[PlaneSpec]
    objects: List[ObjectSpec]
    camera_positions: np.ndarray  # (frames, 3) world
    look_at: np.ndarray
    detector: DetectorSpec = field(default_factory=DetectorSpec)
    depth_noise_std_m: float = 0.0

    @property
    def class_names(self) -> List[str]:
        names = []
        for obj in self.objects:
            if obj.class_name not in names:
                names.append(obj.class_name)
        return names

    def class_id(self, name: str) -> int:
        return self.class_names.index(name)


def load_scene_spec(path) -> SceneSpec:
    with open(path) as fh:
        obj = json.load(fh)
    return scene_spec_from_dict(obj)


def scene_spec_from_dict(obj: dict) -> SceneSpec:
    intr = obj["intrinsics"]
    intrinsics = CameraIntrinsics(
        fx=float(intr["fx"]), fy=float(intr["fy"]),
        cx=float(intr["cx"]), cy=float(intr["cy"]),
        width=int(intr["width"]), height=int(intr["height"]),
        depth_scale=float(intr.get("depth_scale", 0.001)),
    )
    planes = [
        PlaneSpec(center=np.asarray(p["center"], dtype=np.float64),
                  normal=np.asarray(p["normal"], dtype=np.float64),
                  extent=(float(p["extent"][0]), float(p["extent"][1])))
        for p in obj.get("planes", [])
    ]
    objects = []
    for o in obj.get("objects", []):
        objects.append(ObjectSpec(
            class_name=str(o["class_name"]),
            primitive=str(o["primitive"]),
            center=np.asarray(o["center"], dtype=np.float64),
            size=None if "size" not in o else np.asarray(o["size"], np.float64),
            radius=o.get("radius"),
            height=o.get("height"),
            yaw_deg=float(o.get("yaw_deg", 0.0)),
        ))
    traj = obj["trajectory"]
    frames = int(traj["frames"])
    if frames < 1:
        raise ValidationError("trajectory needs at least one frame")
    if traj.get("type", "orbit") == "orbit":
        radius = float(traj["radius"])
        height = float(traj["height"])
        start = math.radians(float(traj.get("start_deg", 0.0)))
        sweep = math.radians(float(traj.get("sweep_deg", 360.0)))
        angles = start + sweep * np.arange(frames) / frames
        positions = np.stack([radius * np.cos(angles),
                              radius * np.sin(angles),
                              np.full(frames, height)], axis=1)
        look_at = np.asarray(traj.get("target", [0, 0, 0]), dtype=np.float64)
    else:
        waypoints = np.asarray(traj["waypoints"], dtype=np.float64).reshape(-1, 3)
        look_at = np.asarray(traj["look_at"], dtype=np.float64)
        if len(waypoints) == 1:
            positions = np.repeat(waypoints, frames, axis=0)
        else:
            # Arclength-uniform samples along the waypoint polyline.
            seg = np.linalg.norm(np.diff(waypoints, axis=0), axis=1)
            cum = np.concatenate([[0.0], np.cumsum(seg)])
            s = np.linspace(0.0, cum[-1], frames)
            positions = np.stack([
                np.interp(s, cum, waypoints[:, k]) for k in range(3)
            ], axis=1)
    det = obj.get("detector", {})
    detector = DetectorSpec(
        dropout=float(det.get("dropout", 0.0)),
        bbox_jitter_px=float(det.get("bbox_jitter_px", 0.0)),
        bbox_pad_px=float(det.get("bbox_pad_px", 0.0)),
        score_range=tuple(det.get("score_range", (0.7, 1.0))),
        min_visible_px=int(det.get("min_visible_px", 50)),
    )
    return SceneSpec(
        seed=int(obj.get("seed", 0)),
        intrinsics=intrinsics,
        planes=planes,
        objects=objects,
        camera_positions=positions,
        look_at=look_at,
        detector=detector,
        depth_noise_std_m=float(obj.get("depth_noise_std_m", 0.0)),
    )


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose with +z forward, +x right, +y down in the image."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < _EPS:
        raise ValidationError("camera eye coincides with look-at target")
    forward /= norm
    up = np.asarray(up, dtype=np.float64)
    if abs(forward @ up) > 1.0 - 1e-6:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=1)
    u, _, vt = np.linalg.svd(rot)
    return Pose(u @ vt, eye)


def scene_trajectory(scene: SceneSpec) -> Trajectory:
    entries = {}
    for kf, eye in enumerate(scene.camera_positions):
        entries[kf] = (float(kf), look_at_pose(eye, scene.look_at))
    return Trajectory(entries)


def render_depth(scene: SceneSpec, pose: Pose, intrinsics: CameraIntrinsics,
                 rng: Optional[np.random.Generator] = None
                 ) -> Tuple[np.ndarray, np.ndarray]:
    """Ray-cast one frame; returns (uint16 depth raster, int32 label raster).

    Labels: 0 background, 1..P supporting planes, P+1.. objects in spec
    order. Depth is z along the camera axis, quantized to raw units
    (millimeters by default); optional Gaussian noise is added before
    quantization.
    """
    w, h = intrinsics.width, intrinsics.height
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    dirs_cam = np.stack([
        (uu.ravel() - intrinsics.cx) / intrinsics.fx,
        (vv.ravel() - intrinsics.cy) / intrinsics.fy,
        np.ones(w * h),
    ], axis=1)
    dirs = dirs_cam @ pose.rotation.T
    origin = pose.translation

    best_t = np.full(w * h, np.inf)
    labels = np.zeros(w * h, dtype=np.int32)
    for idx, prim in enumerate([*scene.planes, *scene.objects], start=1):
        t = prim.intersect(origin, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        labels = np.where(closer, idx, labels)

    z = best_t
    if rng is not None and scene.depth_noise_std_m > 0:
        z = z + rng.normal(0.0, scene.depth_noise_std_m, size=z.shape)
    raw = np.where(np.isfinite(z), np.rint(z / intrinsics.depth_scale), 0.0)
    raw = np.where((raw >= 1) & (raw <= 65535), raw, 0.0).astype(np.uint16)
    labels = np.where(raw > 0, labels, 0)
    return raw.reshape(h, w), labels.reshape(h, w)


@dataclass
class FrameTruth:
    keyframe_id: int
    visible: List[dict]  # {"object_index", "bbox", "pixels"}


@dataclass
class GroundTruth:
    """Everything the evaluator needs: classes, object geometry, visibility."""

    classes: List[str]
    plane_count: int
    objects: List[dict]       # object_index, label_value, class_id/name, center
    frames: List[FrameTruth]

    def to_json(self) -> dict:
        return {
            "classes": self.classes,
            "plane_count": self.plane_count,
            "objects": self.objects,
            "frames": [
                {"keyframe_id": fr.keyframe_id, "visible": fr.visible}
                for fr in self.frames
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruth":
        return cls(
            classes=list(obj["classes"]),
            plane_count=int(obj["plane_count"]),
            objects=list(obj["objects"]),
            frames=[FrameTruth(int(fr["keyframe_id"]), list(fr["visible"]))
                    for fr in obj["frames"]],
        )


def frame_truth(scene: SceneSpec, labels: np.ndarray, keyframe_id: int
                ) -> FrameTruth:
    """Per-object visibility and tight pixel bboxes from a label raster."""
    visible = []
    offset = len(scene.planes) + 1
    for k in range(len(scene.objects)):
        vs, us = np.nonzero(labels == offset + k)
        if len(us) < scene.detector.min_visible_px:
            continue
        visible.append({
            "object_index": k,
            "bbox": [float(us.min()), float(vs.min()),
                     float(us.max()), float(vs.max())],
            "pixels": int(len(us)),
        })
    return FrameTruth(keyframe_id=keyframe_id, visible=visible)


def simulate_detections(scene: SceneSpec, truth: GroundTruth) -> List[Detection]:
    """Detector emulation: per visible object, jittered bbox + uniform score,
    skipped with the dropout probability. Streams are reproducible: each
    frame draws from a generator seeded by (scene seed, keyframe id)."""
    w, h = scene.intrinsics.width, scene.intrinsics.height
    jitter = scene.detector.bbox_jitter_px
    pad = np.array([-1.0, -1.0, 1.0, 1.0]) * scene.detector.bbox_pad_px
    lo, hi = scene.detector.score_range
    detections = []
    for fr in truth.frames:
        rng = np.random.default_rng([scene.seed, fr.keyframe_id])
        for vis in fr.visible:
            drop = rng.uniform()
            offs = rng.uniform(-jitter, jitter, size=4) if jitter > 0 else np.zeros(4)
            score = rng.uniform(lo, hi)
            if drop < scene.detector.dropout:
                continue
            obj = scene.objects[vis["object_index"]]
            xmin, ymin, xmax, ymax = (np.asarray(vis["bbox"]) + pad + offs)
            xmin = float(np.clip(xmin, 0, w - 2))
            ymin = float(np.clip(ymin, 0, h - 2))
            xmax = float(np.clip(xmax, xmin + 1, w - 1))
            ymax = float(np.clip(ymax, ymin + 1, h - 1))
            detections.append(Detection(
                keyframe_id=fr.keyframe_id,
                class_id=scene.class_id(obj.class_name),
                class_name=obj.class_name,
                score=float(score),
                bbox=(xmin, ymin, xmax, ymax),
            ))
    return detections


def generate_dataset(scene: SceneSpec, out_dir) -> GroundTruth:
    """Render the full dataset layout the pipeline consumes, plus ground truth."""
    root = Path(out_dir)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(exist_ok=True)

    trajectory = scene_trajectory(scene)
    save_intrinsics(root / "intrinsics.json", scene.intrinsics)
    save_trajectory(root / "trajectory.tum", trajectory)

    frames = []
    noise_rng = (np.random.default_rng([scene.seed, 0xD])
                 if scene.depth_noise_std_m > 0 else None)
    for kf in trajectory.keyframe_ids():
        raster, labels = render_depth(scene, trajectory.pose(kf),
                                      scene.intrinsics, noise_rng)
        save_depth_raster(root / "frames" / f"frame_{kf}.pgm", raster)
        save_depth_raster(root / "labels" / f"label_{kf}.pgm",
                          labels.astype(np.uint16))
        frames.append(frame_truth(scene, labels, kf))

    truth = GroundTruth(
        classes=scene.class_names,
        plane_count=len(scene.planes),
        objects=[
            {
                "object_index": k,
                "label_value": len(scene.planes) + 1 + k,
                "class_id": scene.class_id(obj.class_name),
                "class_name": obj.class_name,
                "center": [float(c) for c in obj.center],
                "primitive": obj.primitive,
            }
            for k, obj in enumerate(scene.objects)
        ],
        frames=frames,
    )
    detections = simulate_detections(scene, truth)
    save_detections(root / "detections.jsonl", detections)
    with open(root / "ground_truth.json", "w") as fh:
        json.dump(truth.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return truth


@dataclass(frozen=True)
class InventoryRow:
    class_name: str
    true_pos: int
    false_pos: int
    false_neg: int


def score_inventory(mapped_objects: List[dict], truth: GroundTruth,
                    max_centroid_dist: float = 0.25) -> List[InventoryRow]:
    """Greedy same-class matching of mapped objects to ground truth.

    mapped_objects: dicts with "class_name" and "centroid". Within a class,
    candidate pairs are taken in ascending centroid distance under the cap;
    leftovers count as false positives (mapped) or false negatives (truth).
    Rows come back sorted by class name.
    """
    classes = sorted({o["class_name"] for o in truth.objects}
                     | {m["class_name"] for m in mapped_objects})
    rows = []
    for cls in classes:
        mapped = [m for m in mapped_objects if m["class_name"] == cls]
        actual = [o for o in truth.objects if o["class_name"] == cls]
        pairs = []
        for mi, m in enumerate(mapped):
            for gi, g in enumerate(actual):
                dist = float(np.linalg.norm(
                    np.asarray(m["centroid"]) - np.asarray(g["center"])))
                if dist <= max_centroid_dist:
                    pairs.append((dist, mi, gi))
        pairs.sort()
        used_m, used_g = set(), set()
        tp = 0
        for _, mi, gi in pairs:
            if mi in used_m or gi in used_g:
                continue
            used_m.add(mi)
            used_g.add(gi)
            tp += 1
        rows.append(InventoryRow(
            class_name=cls,
            true_pos=tp,
            false_pos=len(mapped) - tp,
            false_neg=len(actual) - tp,
        ))
    return rows
