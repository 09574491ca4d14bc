"""The semantic map: object landmarks with point-cloud models, pose indices,
and accumulated per-class confidence, plus the per-keyframe non-object clouds.

Each landmark keeps its raw camera-frame segments so its world-frame model
(downsampled to 5 mm) can be rebuilt whenever the trajectory estimate
changes. Confidence bookkeeping follows the additive rule s_c += score, with
label argmax_c s_c and confidence max_c s_c / n.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import (ConsistencyError, LandmarkNotFoundError, RegistryError,
                     ValidationError)
from .frameio import load_point_cloud, load_trajectory, save_point_cloud, save_trajectory
from .geometry import (PointCloud, SpatialIndex, Trajectory, transform_cloud,
                       voxel_cells, voxel_downsample)
from .segmentation import SegmentedDetection

MODEL_RESOLUTION = 0.005  # meters; landmark models are kept at 5 mm


class ClassRegistry:
    """The ordered set of known classes; ids are dense 0..n-1."""

    def __init__(self, names: List[str]):
        if len(set(names)) != len(names):
            raise ValidationError("duplicate class names in registry")
        self._names = list(names)
        self._ids = {name: i for i, name in enumerate(names)}

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self):
        return iter(enumerate(self._names))

    def name_of(self, class_id: int) -> str:
        if not 0 <= class_id < len(self._names):
            raise RegistryError(f"unknown class id {class_id}")
        return self._names[class_id]

    def id_of(self, name: str) -> int:
        if name not in self._ids:
            raise RegistryError(f"unknown class name {name!r}")
        return self._ids[name]

    def label_of(self, landmark: "ObjectLandmark") -> Tuple[int, str]:
        class_id = object_label(landmark)
        return class_id, self.name_of(class_id)

    @classmethod
    def from_detections(cls, detections) -> "ClassRegistry":
        """Build a registry from a detection stream with dense class ids."""
        pairs = {}
        for det in detections:
            prev = pairs.setdefault(det.class_id, det.class_name)
            if prev != det.class_name:
                raise RegistryError(
                    f"class id {det.class_id} maps to both "
                    f"{prev!r} and {det.class_name!r}"
                )
        if not pairs:
            return cls([])
        ids = sorted(pairs)
        if ids != list(range(len(ids))):
            raise RegistryError(
                f"detection class ids {ids} are not dense 0..{len(ids) - 1}; "
                "supply an explicit class list in the pipeline config"
            )
        return cls([pairs[i] for i in ids])


@dataclass
class LandmarkSegment:
    """One associated observation: the segment as seen from its keyframe."""

    keyframe_id: int
    cloud: PointCloud  # camera frame
    score: float
    class_id: int


@dataclass
class ObjectLandmark:
    """A mapped object instance."""

    landmark_id: int
    segments: List[LandmarkSegment] = field(default_factory=list)
    pose_indices: List[int] = field(default_factory=list)
    s: np.ndarray = None  # per-class confidence, length = registry size
    model: PointCloud = None         # world frame, 5 mm resolution
    model_centroid: np.ndarray = None
    _index: Optional[SpatialIndex] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.segments)

    def confidence(self) -> float:
        if self.n == 0:
            raise ValidationError("confidence undefined for unobserved landmark")
        return float(self.s.max()) / self.n

    def model_index(self) -> SpatialIndex:
        if self._index is None:
            self._index = SpatialIndex(self.model.points)
        return self._index

    def _set_model(self, model: PointCloud) -> None:
        self.model = model
        self.model_centroid = model.points.mean(axis=0)
        self._index = None


def object_label(landmark: ObjectLandmark) -> int:
    """Class id with the highest accumulated score; ties pick the lowest id."""
    if landmark.n == 0:
        raise ValidationError("label undefined for unobserved landmark")
    return int(np.argmax(landmark.s))


def object_confidence(landmark: ObjectLandmark) -> float:
    return landmark.confidence()


class SemanticMap:
    """Landmarks plus non-object keyframe clouds, backed by a trajectory."""

    def __init__(self, registry: ClassRegistry, trajectory: Trajectory):
        self.registry = registry
        self.trajectory = trajectory
        self.landmarks: Dict[int, ObjectLandmark] = {}
        self.nonobject_clouds: Dict[int, PointCloud] = {}  # camera frame
        self._next_id = 0

    def _require_keyframe(self, keyframe_id: int) -> None:
        if keyframe_id not in self.trajectory:
            raise ConsistencyError(f"keyframe {keyframe_id} not in trajectory")

    def store_nonobject(self, keyframe_id: int, cloud: PointCloud) -> None:
        self._require_keyframe(keyframe_id)
        self.nonobject_clouds[keyframe_id] = cloud


def insert_object(semantic_map: SemanticMap, seg_det: SegmentedDetection,
                  keyframe_id: int) -> int:
    """Create a new landmark from a segmented detection; returns its id."""
    semantic_map._require_keyframe(keyframe_id)
    det = seg_det.detection
    semantic_map.registry.name_of(det.class_id)  # raises RegistryError if unknown

    lm = ObjectLandmark(landmark_id=semantic_map._next_id)
    lm.s = np.zeros(len(semantic_map.registry))
    semantic_map._next_id += 1

    segment = LandmarkSegment(
        keyframe_id=keyframe_id,
        cloud=seg_det.segment.cloud,
        score=det.score,
        class_id=det.class_id,
    )
    lm.segments.append(segment)
    lm.pose_indices.append(keyframe_id)
    lm.s[det.class_id] += det.score
    pose = semantic_map.trajectory.pose(keyframe_id)
    world = transform_cloud(segment.cloud, pose)
    lm._set_model(voxel_downsample(world, MODEL_RESOLUTION))
    semantic_map.landmarks[lm.landmark_id] = lm
    return lm.landmark_id


def update_object(semantic_map: SemanticMap, landmark_id: int,
                  seg_det: SegmentedDetection, keyframe_id: int) -> None:
    """Fuse a new observation into an existing landmark."""
    if landmark_id not in semantic_map.landmarks:
        raise LandmarkNotFoundError(f"no landmark {landmark_id}")
    semantic_map._require_keyframe(keyframe_id)
    det = seg_det.detection
    semantic_map.registry.name_of(det.class_id)

    lm = semantic_map.landmarks[landmark_id]
    segment = LandmarkSegment(
        keyframe_id=keyframe_id,
        cloud=seg_det.segment.cloud,
        score=det.score,
        class_id=det.class_id,
    )
    lm.segments.append(segment)
    if keyframe_id not in lm.pose_indices:
        lm.pose_indices.append(keyframe_id)
    lm.s[det.class_id] += det.score
    pose = semantic_map.trajectory.pose(keyframe_id)
    world = transform_cloud(segment.cloud, pose)
    merged = PointCloud(np.vstack([lm.model.points, world.points]))
    lm._set_model(voxel_downsample(merged, MODEL_RESOLUTION))


def _rebuild_model(semantic_map: SemanticMap, lm: ObjectLandmark) -> None:
    clouds = []
    for segment in lm.segments:
        pose = semantic_map.trajectory.pose(segment.keyframe_id)
        clouds.append(transform_cloud(segment.cloud, pose).points)
    merged = PointCloud(np.vstack(clouds))
    lm._set_model(voxel_downsample(merged, MODEL_RESOLUTION))


def apply_trajectory_update(semantic_map: SemanticMap,
                            new_trajectory: Trajectory) -> None:
    """Swap in corrected poses and rebuild every landmark model from its
    stored camera-frame segments. Confidences and counts are untouched."""
    in_use = set(semantic_map.nonobject_clouds)
    for lm in semantic_map.landmarks.values():
        in_use.update(lm.pose_indices)
    missing = sorted(kf for kf in in_use if kf not in new_trajectory)
    if missing:
        raise ConsistencyError(
            f"new trajectory missing keyframes {missing}"
        )
    semantic_map.trajectory = new_trajectory
    for lm_id in sorted(semantic_map.landmarks):
        _rebuild_model(semantic_map, semantic_map.landmarks[lm_id])


@dataclass(frozen=True)
class GeneratedMap:
    """Explicit world-frame map: attributed object points plus background."""

    objects: PointCloud
    object_class_ids: np.ndarray
    object_ids: np.ndarray
    object_sigmas: np.ndarray
    nonobjects: PointCloud


def generate_map(semantic_map: SemanticMap,
                 object_resolution: float = 0.005,
                 nonobject_resolution: float = 0.01) -> GeneratedMap:
    """Project stored clouds under the current poses into one explicit map.

    Object models are emitted at object_resolution with per-point class and
    object ids; cells claimed by two landmarks keep the lower id. Non-object
    keyframe clouds are pooled and downsampled at nonobject_resolution.
    """
    obj_points = []
    obj_class = []
    obj_ids = []
    obj_sigma = []
    seen_cells = {}
    for lm_id in sorted(semantic_map.landmarks):
        lm = semantic_map.landmarks[lm_id]
        for segment in lm.segments:
            if segment.keyframe_id not in semantic_map.trajectory:
                raise ConsistencyError(
                    f"keyframe {segment.keyframe_id} has no pose"
                )
        down = voxel_downsample(lm.model, object_resolution)
        cells = voxel_cells(down.points, object_resolution)
        fresh = np.ones(len(down), dtype=bool)
        for row, cell in enumerate(map(tuple, cells)):
            if cell in seen_cells:
                fresh[row] = False
            else:
                seen_cells[cell] = lm_id
        pts = down.points[fresh]
        class_id, _ = semantic_map.registry.label_of(lm)
        obj_points.append(pts)
        obj_class.append(np.full(len(pts), class_id, dtype=np.int32))
        obj_ids.append(np.full(len(pts), lm_id, dtype=np.int32))
        obj_sigma.append(np.full(len(pts), lm.confidence()))

    if obj_points:
        objects = PointCloud(np.vstack(obj_points))
        object_class_ids = np.concatenate(obj_class)
        object_ids = np.concatenate(obj_ids)
        object_sigmas = np.concatenate(obj_sigma)
    else:
        objects = PointCloud(np.zeros((0, 3)))
        object_class_ids = np.zeros(0, dtype=np.int32)
        object_ids = np.zeros(0, dtype=np.int32)
        object_sigmas = np.zeros(0)

    non_parts = []
    for kf in sorted(semantic_map.nonobject_clouds):
        if kf not in semantic_map.trajectory:
            raise ConsistencyError(f"keyframe {kf} has no pose")
        cloud = semantic_map.nonobject_clouds[kf]
        if len(cloud) == 0:
            continue
        non_parts.append(transform_cloud(cloud, semantic_map.trajectory.pose(kf)).points)
    if non_parts:
        nonobjects = voxel_downsample(PointCloud(np.vstack(non_parts)),
                                      nonobject_resolution)
    else:
        nonobjects = PointCloud(np.zeros((0, 3)))

    return GeneratedMap(
        objects=objects,
        object_class_ids=object_class_ids,
        object_ids=object_ids,
        object_sigmas=object_sigmas,
        nonobjects=nonobjects,
    )


# ---------------------------------------------------------------------------
# Map state persistence (run output -> later export)
# ---------------------------------------------------------------------------

def save_map_state(semantic_map: SemanticMap, out_dir) -> None:
    """Persist the full map (segments, confidences, trajectory) to a directory."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    save_trajectory(root / "trajectory.tum", semantic_map.trajectory)

    landmarks_meta = []
    for lm_id in sorted(semantic_map.landmarks):
        lm = semantic_map.landmarks[lm_id]
        seg_dir = root / "landmarks" / str(lm_id)
        seg_dir.mkdir(parents=True, exist_ok=True)
        seg_meta = []
        for k, segment in enumerate(lm.segments):
            save_point_cloud(seg_dir / f"segment_{k}.ply", segment.cloud)
            seg_meta.append({
                "keyframe_id": segment.keyframe_id,
                "score": segment.score,
                "class_id": segment.class_id,
            })
        landmarks_meta.append({
            "landmark_id": lm_id,
            "segments": seg_meta,
            "pose_indices": lm.pose_indices,
            "s": [float(v) for v in lm.s],
        })

    non_dir = root / "nonobject"
    non_dir.mkdir(exist_ok=True)
    for kf in sorted(semantic_map.nonobject_clouds):
        save_point_cloud(non_dir / f"{kf}.ply", semantic_map.nonobject_clouds[kf])

    meta = {
        "classes": [name for _, name in semantic_map.registry],
        "landmarks": landmarks_meta,
        "nonobject_keyframes": sorted(semantic_map.nonobject_clouds),
        "next_id": semantic_map._next_id,
    }
    with open(root / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_map_state(state_dir) -> SemanticMap:
    root = Path(state_dir)
    with open(root / "meta.json") as fh:
        meta = json.load(fh)
    registry = ClassRegistry(meta["classes"])
    trajectory = load_trajectory(root / "trajectory.tum")
    semantic_map = SemanticMap(registry, trajectory)
    semantic_map._next_id = meta["next_id"]

    for lm_meta in meta["landmarks"]:
        lm_id = lm_meta["landmark_id"]
        lm = ObjectLandmark(landmark_id=lm_id)
        lm.s = np.asarray(lm_meta["s"], dtype=np.float64)
        lm.pose_indices = [int(k) for k in lm_meta["pose_indices"]]
        for k, seg_meta in enumerate(lm_meta["segments"]):
            cloud = load_point_cloud(root / "landmarks" / str(lm_id)
                                     / f"segment_{k}.ply")
            lm.segments.append(LandmarkSegment(
                keyframe_id=int(seg_meta["keyframe_id"]),
                cloud=cloud,
                score=float(seg_meta["score"]),
                class_id=int(seg_meta["class_id"]),
            ))
        semantic_map.landmarks[lm_id] = lm
        _rebuild_model(semantic_map, lm)

    for kf in meta["nonobject_keyframes"]:
        cloud = load_point_cloud(root / "nonobject" / f"{kf}.ply")
        semantic_map.nonobject_clouds[int(kf)] = cloud
    return semantic_map
