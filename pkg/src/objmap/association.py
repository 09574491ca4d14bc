"""Two-stage data association: centroid gating, then a nearest-neighbor
point-match fraction against each candidate landmark's sparse model.

A detection joins an existing landmark when at least min_fraction of its 3D
points lie within point_distance of the landmark model (both thresholds
inclusive); otherwise it founds a new object. Decisions are pure: nothing
here mutates the map.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .errors import ValidationError
from .geometry import PointCloud, SpatialIndex
from .segmentation import SegmentedDetection

_TIE_TOL = 1e-6


@dataclass(frozen=True)
class AssociationConfig:
    gate_radius: float = 1.0       # centroid gate, meters
    point_distance: float = 0.02   # per-point match distance, meters
    min_fraction: float = 0.5      # fraction of points that must match

    def __post_init__(self):
        if self.gate_radius <= 0 or self.point_distance <= 0:
            raise ValidationError("association distances must be positive")
        if not 0.0 < self.min_fraction <= 1.0:
            raise ValidationError("min_fraction must be in (0, 1]")


class Outcome(enum.Enum):
    MATCHED = "matched"
    NEW_OBJECT = "new_object"
    SKIPPED = "skipped"


@dataclass(frozen=True)
class AssociationResult:
    detection_ref: SegmentedDetection
    outcome: Outcome
    landmark_id: Optional[int] = None
    fraction: Optional[float] = None
    candidates_checked: int = 0


def candidate_landmarks(segment_centroid: np.ndarray, semantic_map,
                        gate_radius: float) -> List[int]:
    """Landmark ids whose model centroid lies within the gate, nearest first."""
    centroid = np.asarray(segment_centroid, dtype=np.float64).reshape(3)
    hits = []
    for lm_id in sorted(semantic_map.landmarks):
        lm = semantic_map.landmarks[lm_id]
        dist = float(np.linalg.norm(lm.model_centroid - centroid))
        if dist <= gate_radius:
            hits.append((dist, lm_id))
    hits.sort()
    return [lm_id for _, lm_id in hits]


def match_fraction(segment: PointCloud, landmark_model: SpatialIndex,
                   point_distance: float) -> float:
    """Fraction of segment points within point_distance of the model."""
    if len(segment) == 0:
        raise ValidationError("match_fraction needs a non-empty segment")
    dists = landmark_model.nearest_distances(segment.points)
    return float(np.count_nonzero(dists <= point_distance)) / len(segment)


def associate(seg_det: SegmentedDetection, world_cloud: PointCloud,
              semantic_map, cfg: AssociationConfig) -> AssociationResult:
    """Decide matched / new_object for one segmented detection.

    world_cloud is the detection's segment already in the world frame. All
    gated candidates are scored; the highest fraction meeting min_fraction
    wins, with fractions within 1e-6 of the best resolved to the lowest
    landmark id. Empty segments are skipped without touching the map.
    """
    if len(world_cloud) == 0:
        return AssociationResult(seg_det, Outcome.SKIPPED)
    centroid = world_cloud.points.mean(axis=0)
    candidates = candidate_landmarks(centroid, semantic_map, cfg.gate_radius)

    scored = [
        (lm_id, match_fraction(world_cloud,
                               semantic_map.landmarks[lm_id].model_index(),
                               cfg.point_distance))
        for lm_id in candidates
    ]
    if scored:
        best = max(fraction for _, fraction in scored)
        if best >= cfg.min_fraction:
            winner = min(lm_id for lm_id, fraction in scored
                         if fraction >= max(best - _TIE_TOL, cfg.min_fraction))
            fraction = dict(scored)[winner]
            return AssociationResult(
                seg_det, Outcome.MATCHED, landmark_id=winner,
                fraction=fraction, candidates_checked=len(scored),
            )
    return AssociationResult(
        seg_det, Outcome.NEW_OBJECT, candidates_checked=len(scored),
    )
