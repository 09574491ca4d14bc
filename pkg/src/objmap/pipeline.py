"""Per-keyframe orchestration: segmentation, detection binding, association,
and map updates, with stage timing instrumentation.

Keyframes are processed strictly in ascending id order because association
depends on the evolving map. A keyframe that fails mid-update is rolled back
so the map never holds partial state.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .association import AssociationConfig, Outcome, associate
from .errors import PipelineError, ValidationError
from .frameio import (KeyframeRecord, load_detections, load_depth_frame,
                      load_intrinsics, load_trajectory)
from .geometry import PointCloud, estimate_normals, transform_cloud
from .objectmap import (ClassRegistry, SemanticMap, apply_trajectory_update,
                        insert_object, update_object)
from .segmentation import (assign_segments_to_detections,
                           extract_supporting_planes, segment_graph,
                           weight_graph)
from .supervoxel import build_adjacency, oversegment

log = logging.getLogger(__name__)

_CONFIG_FIELDS = {
    "normal_k": int,
    "seed_resolution": float,
    "supervoxel_weights": tuple,
    "supervoxel_iterations": int,
    "contact_distance": float,
    "plane_angle_tol_deg": float,
    "plane_dist_tol": float,
    "plane_min_support": int,
    "ransac_iterations": int,
    "ransac_seed": int,
    "merge_k": float,
    "min_overlap": float,
    "gate_radius": float,
    "point_distance": float,
    "min_fraction": float,
    "object_resolution": float,
    "nonobject_resolution": float,
    "min_segment_points": int,
    "classes": list,
}


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable threshold of the pipeline in one place."""

    normal_k: int = 10
    seed_resolution: float = 0.05
    supervoxel_weights: Tuple[float, float, float] = (0.4, 0.4, 0.2)
    supervoxel_iterations: int = 10
    contact_distance: Optional[float] = None  # None: 2x median point spacing
    plane_angle_tol_deg: float = 10.0
    plane_dist_tol: float = 0.015
    plane_min_support: int = 200
    ransac_iterations: int = 200
    ransac_seed: int = 42
    merge_k: float = 0.6
    min_overlap: float = 0.5
    gate_radius: float = 1.0
    point_distance: float = 0.02
    min_fraction: float = 0.5
    object_resolution: float = 0.005
    nonobject_resolution: float = 0.01
    min_segment_points: int = 50
    classes: Optional[Tuple[str, ...]] = None  # None: derive from detections

    def __post_init__(self):
        positive = (
            "normal_k seed_resolution plane_angle_tol_deg plane_dist_tol "
            "plane_min_support ransac_iterations merge_k gate_radius "
            "point_distance object_resolution nonobject_resolution "
            "min_segment_points supervoxel_iterations"
        ).split()
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValidationError(f"config field {name} must be positive")
        if self.contact_distance is not None and self.contact_distance <= 0:
            raise ValidationError("contact_distance must be positive")
        if not 0.0 < self.min_overlap <= 1.0:
            raise ValidationError("min_overlap must be in (0, 1]")
        if not 0.0 < self.min_fraction <= 1.0:
            raise ValidationError("min_fraction must be in (0, 1]")

    def association(self) -> AssociationConfig:
        return AssociationConfig(
            gate_radius=self.gate_radius,
            point_distance=self.point_distance,
            min_fraction=self.min_fraction,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["supervoxel_weights"] = list(self.supervoxel_weights)
        out["classes"] = None if self.classes is None else list(self.classes)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        unknown = set(obj) - set(_CONFIG_FIELDS)
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(obj)
        if "supervoxel_weights" in kwargs:
            kwargs["supervoxel_weights"] = tuple(kwargs["supervoxel_weights"])
        if kwargs.get("classes") is not None:
            kwargs["classes"] = tuple(kwargs["classes"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: {exc}") from None
        return cls.from_dict(obj)


@dataclass
class KeyframeReport:
    """Counts and per-stage wall time for one processed keyframe."""

    keyframe_id: int
    supervoxels: int = 0
    edges: int = 0
    planes: int = 0
    segments: int = 0
    detections: int = 0
    assigned: int = 0
    matched: int = 0
    new_objects: int = 0
    skipped: int = 0
    stage_ms: Dict[str, float] = field(default_factory=dict)

    def consistent(self) -> bool:
        return self.assigned == self.matched + self.new_objects + self.skipped


class _StageTimer:
    def __init__(self, report: KeyframeReport):
        self.report = report
        self._t0 = None
        self._name = None

    def start(self, name: str):
        self._name = name
        self._t0 = time.perf_counter()

    def stop(self):
        elapsed = (time.perf_counter() - self._t0) * 1000.0
        self.report.stage_ms[self._name] = round(elapsed, 3)


def process_keyframe(semantic_map: SemanticMap, frame: KeyframeRecord,
                     cfg: PipelineConfig, intrinsics) -> KeyframeReport:
    """Run the full per-keyframe flow and mutate the map accordingly.

    Stages: normals, supervoxels, adjacency, planes, weights, graph cut,
    detection binding, then per-detection association and insert/update.
    Detections are associated in descending score order. On failure the
    keyframe's map mutations are rolled back before the error propagates.
    """
    if frame.keyframe_id not in semantic_map.trajectory:
        raise PipelineError(frame.keyframe_id, "pose missing from trajectory")
    report = KeyframeReport(keyframe_id=frame.keyframe_id,
                            detections=len(frame.detections))
    timer = _StageTimer(report)
    pose = semantic_map.trajectory.pose(frame.keyframe_id)

    if len(frame.cloud) < max(cfg.normal_k, 3):
        # Not enough structure to segment; everything is background.
        semantic_map.store_nonobject(frame.keyframe_id, frame.cloud)
        return report

    timer.start("normals")
    cloud, degenerate = estimate_normals(frame.cloud, cfg.normal_k)
    timer.stop()
    if degenerate:
        log.debug("keyframe %d: %d degenerate normals",
                  frame.keyframe_id, degenerate)

    timer.start("supervoxels")
    supervoxels = oversegment(cloud, cfg.seed_resolution,
                              cfg.supervoxel_weights,
                              cfg.supervoxel_iterations)
    timer.stop()
    report.supervoxels = len(supervoxels)

    timer.start("adjacency")
    graph = build_adjacency(supervoxels, cloud, cfg.contact_distance)
    timer.stop()
    report.edges = len(graph.edge_index)

    timer.start("planes")
    planes = extract_supporting_planes(
        supervoxels, cfg.plane_angle_tol_deg, cfg.plane_dist_tol,
        cfg.plane_min_support, cfg.ransac_seed, cfg.ransac_iterations)
    timer.stop()
    report.planes = len(planes)

    timer.start("weights")
    weight_graph(graph)
    timer.stop()

    timer.start("graph_cut")
    segments = segment_graph(graph, cfg.merge_k)
    timer.stop()
    report.segments = len(segments)

    timer.start("binding")
    seg_dets = assign_segments_to_detections(
        segments, frame.detections, intrinsics, cfg.min_overlap)
    timer.stop()
    report.assigned = len(seg_dets)

    # Highest-confidence detections commit first.
    order = sorted(range(len(seg_dets)),
                   key=lambda k: (-seg_dets[k].detection.score, k))

    timer.start("association")
    association_cfg = cfg.association()
    committed_indices = []
    undo_log = []
    try:
        for k in order:
            seg_det = seg_dets[k]
            n_points = len(seg_det.segment.cloud)
            if n_points < cfg.min_segment_points:
                report.skipped += 1
                continue
            world_cloud = transform_cloud(seg_det.segment.cloud, pose)
            result = associate(seg_det, world_cloud, semantic_map,
                               association_cfg)
            if result.outcome is Outcome.SKIPPED:
                report.skipped += 1
                continue
            if result.outcome is Outcome.MATCHED:
                lm = semantic_map.landmarks[result.landmark_id]
                undo_log.append(("update", result.landmark_id,
                                 lm.s.copy(), lm.model,
                                 list(lm.pose_indices), len(lm.segments)))
                update_object(semantic_map, result.landmark_id, seg_det,
                              frame.keyframe_id)
                report.matched += 1
            else:
                new_id = insert_object(semantic_map, seg_det,
                                       frame.keyframe_id)
                undo_log.append(("insert", new_id))
                report.new_objects += 1
            committed_indices.append(k)
    except Exception as exc:
        _rollback(semantic_map, undo_log)
        raise PipelineError(frame.keyframe_id, str(exc)) from exc
    finally:
        timer.stop()

    # Residual points not claimed by any committed segment become background.
    claimed = np.zeros(len(frame.cloud), dtype=bool)
    for k in committed_indices:
        seg = seg_dets[k].segment
        for sv_id in seg.supervoxel_ids:
            claimed[supervoxels[sv_id].point_indices] = True
    residual = PointCloud(
        points=frame.cloud.points[~claimed],
        colors=None if frame.cloud.colors is None
        else frame.cloud.colors[~claimed],
    )
    semantic_map.store_nonobject(frame.keyframe_id, residual)
    return report


def _rollback(semantic_map: SemanticMap, undo_log) -> None:
    for entry in reversed(undo_log):
        if entry[0] == "insert":
            _, lm_id = entry
            del semantic_map.landmarks[lm_id]
            semantic_map._next_id = lm_id
        else:
            _, lm_id, s, model, pose_indices, n_segments = entry
            lm = semantic_map.landmarks[lm_id]
            lm.s = s
            lm.pose_indices = pose_indices
            del lm.segments[n_segments:]
            lm._set_model(model)


def run_sequence(dataset_dir, cfg: PipelineConfig
                 ) -> Tuple[SemanticMap, List[KeyframeReport]]:
    """Process a dataset directory keyframe by keyframe.

    Layout: intrinsics.json, trajectory.tum, frames/frame_<id>.pgm,
    detections.jsonl, and optionally updates/<id>.tum holding a replacement
    trajectory applied before keyframe <id>.
    """
    root = Path(dataset_dir)
    intrinsics = load_intrinsics(root / "intrinsics.json")
    trajectory = load_trajectory(root / "trajectory.tum")
    detections = load_detections(root / "detections.jsonl")

    if cfg.classes is not None:
        registry = ClassRegistry(list(cfg.classes))
    else:
        registry = ClassRegistry.from_detections(detections)

    by_keyframe: Dict[int, list] = {}
    for det in detections:
        by_keyframe.setdefault(det.keyframe_id, []).append(det)

    semantic_map = SemanticMap(registry, trajectory)
    reports = []
    updates_dir = root / "updates"
    for kf in trajectory.keyframe_ids():
        update_path = updates_dir / f"{kf}.tum"
        if update_path.exists():
            log.info("applying trajectory update before keyframe %d", kf)
            apply_trajectory_update(semantic_map, load_trajectory(update_path))
        if kf not in semantic_map.trajectory:
            raise PipelineError(kf, "updated trajectory dropped this keyframe")

        frame_path = root / "frames" / f"frame_{kf}.pgm"
        if not frame_path.exists():
            raise PipelineError(kf, f"missing depth frame {frame_path}")
        cloud = load_depth_frame(frame_path, intrinsics)
        frame = KeyframeRecord(
            keyframe_id=kf,
            pose=semantic_map.trajectory.pose(kf),
            cloud=cloud,
            detections=by_keyframe.get(kf, []),
        )
        report = process_keyframe(semantic_map, frame, cfg, intrinsics)
        if not report.consistent():
            raise PipelineError(kf, "keyframe report counts do not reconcile")
        reports.append(report)
        log.debug("keyframe %d: %d segments, %d matched, %d new",
                  kf, report.segments, report.matched, report.new_objects)
    return semantic_map, reports
