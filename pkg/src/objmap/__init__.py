"""Object-oriented semantic mapping: fuse per-keyframe point clouds, poses,
and 2D detections into a map of individual 3D object instances."""

from .association import AssociationConfig, AssociationResult, Outcome, associate
from .errors import ObjmapError
from .frameio import CameraIntrinsics, Detection, KeyframeRecord
from .geometry import PointCloud, Pose, Trajectory
from .objectmap import (ClassRegistry, ObjectLandmark, SemanticMap,
                        apply_trajectory_update, generate_map, insert_object,
                        object_confidence, object_label, update_object)
from .pipeline import KeyframeReport, PipelineConfig, process_keyframe, run_sequence
from .segmentation import (Segment3D, SegmentedDetection, SupportingPlane,
                           assign_segments_to_detections, edge_weight,
                           extract_supporting_planes, segment_graph)
from .supervoxel import SegmentGraph, Supervoxel, build_adjacency, oversegment
from .synth import SceneSpec, generate_dataset, render_depth, score_inventory

__version__ = "0.1.0"

__all__ = [
    "AssociationConfig", "AssociationResult", "Outcome", "associate",
    "ObjmapError", "CameraIntrinsics", "Detection", "KeyframeRecord",
    "PointCloud", "Pose", "Trajectory", "ClassRegistry", "ObjectLandmark",
    "SemanticMap", "apply_trajectory_update", "generate_map", "insert_object",
    "object_confidence", "object_label", "update_object", "KeyframeReport",
    "PipelineConfig", "process_keyframe", "run_sequence", "Segment3D",
    "SegmentedDetection", "SupportingPlane", "assign_segments_to_detections",
    "edge_weight", "extract_supporting_planes", "segment_graph",
    "SegmentGraph", "Supervoxel", "build_adjacency", "oversegment",
    "SceneSpec", "generate_dataset", "render_depth", "score_inventory",
    "__version__",
]
