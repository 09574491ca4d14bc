"""Supporting-plane extraction, edge weighting, and the Kruskal-style graph cut.

Edges between supervoxels are weighted by a four-case rule: zero on a shared
supporting plane, one when exactly one endpoint (or two different planes) is
planar, and a normal-deviation penalty otherwise, squared for convex
junctions and linear for concave ones. The weighted graph is then cut with
the Felzenszwalb-Huttenlocher merge criterion over edges in ascending weight
order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .errors import ValidationError
from .frameio import CameraIntrinsics, Detection
from .geometry import PointCloud
from .supervoxel import SegmentGraph, Supervoxel

SAME_PLANE = "same-plane"
PLANE_ADJACENT = "plane-adjacent"
CONVEX = "convex"
CONCAVE = "concave"

_COINCIDENT_TOL = 1e-9


@dataclass
class SupportingPlane:
    """A large planar surface n . p = d that objects rest on."""

    id: int
    normal: np.ndarray
    offset: float
    inlier_ids: List[int]


@dataclass
class Segment3D:
    """A connected component of supervoxels with its pooled point cloud."""

    id: int
    supervoxel_ids: List[int]
    cloud: PointCloud
    centroid: np.ndarray
    is_plane: bool = False

    def __post_init__(self):
        if len(self.cloud) == 0:
            raise ValidationError("segment must contain points")


@dataclass(frozen=True)
class SegmentedDetection:
    """A detection bound to the 3D segment that best fills its bbox."""

    detection: Detection
    segment: Segment3D
    overlap_ratio: float


def _fit_plane(points: np.ndarray) -> Tuple[np.ndarray, float]:
    """Least-squares plane through points; normal is the smallest PCA axis."""
    center = points.mean(axis=0)
    centered = points - center
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    normal = vt[-1]
    return normal, float(normal @ center)


def extract_supporting_planes(
    supervoxels: List[Supervoxel],
    angle_tol_deg: float = 10.0,
    dist_tol: float = 0.015,
    min_support: int = 200,
    seed: int = 42,
    iterations: int = 200,
) -> List[SupportingPlane]:
    """Greedy sequential RANSAC over supervoxel centroids.

    A supervoxel is an inlier when its centroid lies within dist_tol of the
    candidate plane and its normal is within angle_tol of the plane normal
    (sign-insensitive). Each accepted plane marks its inliers via on_plane_id
    and removes them from the pool; extraction stops when no candidate
    reaches min_support.
    """
    rng = np.random.default_rng(seed)
    centroids = np.array([sv.centroid for sv in supervoxels]).reshape(-1, 3)
    normals = np.array([sv.normal for sv in supervoxels]).reshape(-1, 3)
    cos_tol = np.cos(np.radians(angle_tol_deg))

    planes: List[SupportingPlane] = []
    pool = np.arange(len(supervoxels))
    while len(pool) >= max(min_support, 3):
        pts = centroids[pool]
        nrm = normals[pool]
        picks = rng.integers(0, len(pool), size=(iterations, 3))
        a, b, c = pts[picks[:, 0]], pts[picks[:, 1]], pts[picks[:, 2]]
        cand_n = np.cross(b - a, c - a)
        lengths = np.linalg.norm(cand_n, axis=1)
        ok = lengths > 1e-12
        if not np.any(ok):
            break
        cand_n = cand_n[ok] / lengths[ok][:, None]
        cand_d = np.einsum("ij,ij->i", cand_n, a[ok])

        dist = np.abs(pts @ cand_n.T - cand_d)          # (pool, cands)
        align = np.abs(nrm @ cand_n.T) >= cos_tol
        inlier = (dist <= dist_tol) & align
        counts = inlier.sum(axis=0)
        best = int(np.argmax(counts))
        if counts[best] < min_support:
            break

        # Refit on the consensus set, then recollect inliers once.
        members = pool[inlier[:, best]]
        normal, offset = _fit_plane(centroids[members])
        dist = np.abs(centroids[pool] @ normal - offset)
        align = np.abs(normals[pool] @ normal) >= cos_tol
        members = pool[(dist <= dist_tol) & align]
        if len(members) < min_support:
            break
        # Orient the plane normal with the sensor-facing supervoxel normals.
        if np.mean(normals[members] @ normal) < 0:
            normal, offset = -normal, -offset

        plane_id = len(planes)
        for idx in members:
            supervoxels[idx].on_plane_id = plane_id
        planes.append(SupportingPlane(
            id=plane_id, normal=normal, offset=offset,
            inlier_ids=[int(i) for i in members],
        ))
        keep = np.ones(len(pool), dtype=bool)
        keep[np.searchsorted(pool, members)] = False
        pool = pool[keep]
    return planes


def edge_weight(s_i: Supervoxel, s_j: Supervoxel) -> Tuple[float, str]:
    """Weight and relation for the edge between two adjacent supervoxels.

    Same supporting plane: 0. Exactly one endpoint planar, or two different
    planes: 1. Otherwise convex junctions weigh (1 - n_i . n_j)^2 and concave
    ones (1 - n_i . n_j). A junction is convex when n_i . d - n_j . d >= 0
    for d = (c_i - c_j) / |c_i - c_j|; coincident centroids count as convex.
    """
    p_i, p_j = s_i.on_plane_id, s_j.on_plane_id
    if p_i is not None and p_j is not None and p_i == p_j:
        return 0.0, SAME_PLANE
    if p_i is not None or p_j is not None:
        return 1.0, PLANE_ADJACENT

    dot = float(np.clip(s_i.normal @ s_j.normal, -1.0, 1.0))
    offset = s_i.centroid - s_j.centroid
    length = np.linalg.norm(offset)
    if length < _COINCIDENT_TOL:
        return (1.0 - dot) ** 2, CONVEX
    d = offset / length
    if (s_i.normal - s_j.normal) @ d >= 0.0:
        return (1.0 - dot) ** 2, CONVEX
    return 1.0 - dot, CONCAVE


def weight_graph(graph: SegmentGraph) -> SegmentGraph:
    """Fill weights and relations for every edge in place."""
    for k in range(len(graph.edge_index)):
        i, j = graph.edge_index[k]
        w, rel = edge_weight(graph.nodes[i], graph.nodes[j])
        graph.weights[k] = w
        graph.relations[k] = rel
    return graph


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n
        self.internal = [0.0] * n  # max weight in the component's merge tree

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int, weight: float) -> None:
        ra, rb = self.find(a), self.find(b)
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        self.internal[ra] = max(self.internal[ra], self.internal[rb], weight)


def segment_graph(graph: SegmentGraph, k: float = 0.6) -> List[Segment3D]:
    """Cut the weighted graph into segments (Felzenszwalb-Huttenlocher).

    Edges are scanned in ascending weight order (ties by (i, j)); components
    merge over an edge of weight w iff

        w <= min(Int(C1) + k / |C1|, Int(C2) + k / |C2|)

    where Int(C) is the largest weight accepted inside C. Components that
    contain any supporting-plane supervoxel come back flagged is_plane.
    """
    if np.any(np.isnan(graph.weights)):
        raise ValidationError("segment_graph requires all edge weights set")
    n = len(graph.nodes)
    uf = _UnionFind(n)
    order = np.lexsort((graph.edge_index[:, 1], graph.edge_index[:, 0],
                        graph.weights))
    for e in order:
        i, j = graph.edge_index[e]
        ri, rj = uf.find(int(i)), uf.find(int(j))
        if ri == rj:
            continue
        w = float(graph.weights[e])
        threshold = min(uf.internal[ri] + k / uf.size[ri],
                        uf.internal[rj] + k / uf.size[rj])
        if w <= threshold:
            uf.union(ri, rj, w)

    groups: dict = {}
    for node in range(n):
        groups.setdefault(uf.find(node), []).append(node)
    # Deterministic segment ids: order components by their smallest member.
    components = sorted(groups.values(), key=lambda g: g[0])

    segments = []
    for comp in components:
        sv_ids = sorted(comp)
        indices = np.concatenate([graph.nodes[s].point_indices for s in sv_ids])
        indices = np.sort(indices)
        cloud = PointCloud(
            points=graph.cloud.points[indices],
            colors=None if graph.cloud.colors is None
            else graph.cloud.colors[indices],
        )
        segments.append(Segment3D(
            id=len(segments),
            supervoxel_ids=sv_ids,
            cloud=cloud,
            centroid=cloud.points.mean(axis=0),
            is_plane=any(graph.nodes[s].on_plane_id is not None for s in sv_ids),
        ))
    return segments


def assign_segments_to_detections(
    segments: List[Segment3D],
    detections: List[Detection],
    intrinsics: CameraIntrinsics,
    min_overlap: float = 0.5,
) -> List[SegmentedDetection]:
    """Greedy one-to-one matching of 3D segments to 2D detections.

    overlap_ratio is the fraction of a segment's points whose pinhole
    projection falls inside the detection bbox (bounds inclusive). Pairs are
    taken in descending overlap order, ties by larger point count then lower
    segment id; plane segments never participate. Detections left without a
    segment are dropped, mirroring missed detections.
    """
    candidates = []  # (overlap, seg_points, seg_id, det_index)
    for seg in segments:
        if seg.is_plane:
            continue
        pts = seg.cloud.points
        in_front = pts[:, 2] > 0
        if not np.any(in_front):
            continue
        pix = intrinsics.project(pts[in_front])
        for d_idx, det in enumerate(detections):
            xmin, ymin, xmax, ymax = det.bbox
            inside = ((pix[:, 0] >= xmin) & (pix[:, 0] <= xmax)
                      & (pix[:, 1] >= ymin) & (pix[:, 1] <= ymax))
            overlap = float(np.count_nonzero(inside)) / len(pts)
            if overlap >= min_overlap:
                candidates.append((overlap, len(pts), seg.id, d_idx))

    candidates.sort(key=lambda c: (-c[0], -c[1], c[2], c[3]))
    seg_by_id = {seg.id: seg for seg in segments}
    taken_segments = set()
    taken_detections = set()
    assigned = {}
    for overlap, _, seg_id, d_idx in candidates:
        if seg_id in taken_segments or d_idx in taken_detections:
            continue
        taken_segments.add(seg_id)
        taken_detections.add(d_idx)
        assigned[d_idx] = SegmentedDetection(
            detection=detections[d_idx],
            segment=seg_by_id[seg_id],
            overlap_ratio=overlap,
        )
    return [assigned[d_idx] for d_idx in sorted(assigned)]
