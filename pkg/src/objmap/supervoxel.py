"""Supervoxel over-segmentation and the adjacency graph between supervoxels.

A frame cloud is partitioned into small, locally homogeneous clusters that
act as the atomic nodes of the later graph cut. Seeding and growth are fully
deterministic: seeds come from occupied grid cells ordered lexicographically,
and assignment ties resolve to the lowest seed id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError
from .geometry import PointCloud, median_point_spacing, voxel_cells

# Maximum RGB distance between two colors, ||(255,255,255)||.
_COLOR_NORM = 441.67
_MAX_ITERATIONS = 10
_CANDIDATE_SEEDS = 12


@dataclass
class Supervoxel:
    """A cluster of frame points with its centroid, mean normal, and color."""

    id: int
    point_indices: np.ndarray
    centroid: np.ndarray
    normal: np.ndarray
    mean_color: Optional[np.ndarray] = None
    on_plane_id: Optional[int] = None


@dataclass
class SegmentGraph:
    """Adjacency between supervoxels of one frame.

    Edges are stored once with i < j. Weights and relations stay unset
    (nan / empty) until the weighting pass fills them.
    """

    nodes: List[Supervoxel]
    edge_index: np.ndarray          # (E, 2) int, i < j
    cloud: PointCloud
    weights: np.ndarray = field(default=None)
    relations: np.ndarray = field(default=None)  # dtype=object, relation names

    def __post_init__(self):
        e = len(self.edge_index)
        if self.weights is None:
            self.weights = np.full(e, np.nan)
        if self.relations is None:
            self.relations = np.full(e, None, dtype=object)

    def edges(self):
        """Iterate (i, j, weight, relation) tuples."""
        for k in range(len(self.edge_index)):
            i, j = self.edge_index[k]
            yield int(i), int(j), float(self.weights[k]), self.relations[k]


def _normalize_rows(vectors: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    out = np.where(norms[:, None] > 1e-12, vectors / np.maximum(norms, 1e-300)[:, None],
                   fallback)
    return out


def oversegment(
    cloud: PointCloud,
    seed_resolution: float,
    weights: Tuple[float, float, float] = (0.4, 0.4, 0.2),
    max_iterations: int = _MAX_ITERATIONS,
) -> List[Supervoxel]:
    """Partition a cloud with normals into supervoxels.

    Seeds start as the occupied cells of a cubic grid with pitch
    seed_resolution; points are then reassigned to their best seed for up to
    max_iterations rounds (k-means style) under

        D = w_spatial * |p - c| / seed_resolution
          + w_normal  * (1 - n . n_seed)
          + w_color   * |rgb - rgb_seed| / 441.67

    Candidates are limited to seeds within 2 * seed_resolution. Every point
    ends up in exactly one supervoxel; emptied seeds are dropped.
    """
    if cloud.normals is None:
        raise ValidationError("oversegment requires normals; run estimate_normals")
    if seed_resolution <= 0:
        raise ValueError(f"seed_resolution must be positive, got {seed_resolution}")
    pts = cloud.points
    n = len(pts)
    if n == 0:
        return []
    w_spatial, w_normal, w_color = weights
    has_color = cloud.colors is not None and w_color > 0
    colors = cloud.colors.astype(np.float64) if has_color else None

    # Seed per occupied cell, ordered by cell index then point index.
    cells = voxel_cells(pts, seed_resolution)
    _, first_idx, inverse = np.unique(cells, axis=0, return_index=True,
                                      return_inverse=True)
    n_seeds = len(first_idx)
    assignment = inverse.astype(np.int64)

    seed_pos = np.zeros((n_seeds, 3))
    seed_normal = np.zeros((n_seeds, 3))
    seed_color = np.zeros((n_seeds, 3)) if has_color else None

    def refresh_seeds(keep_empty_at=None):
        counts = np.bincount(assignment, minlength=n_seeds).astype(np.float64)
        occupied = counts > 0
        for axis in range(3):
            seed_pos[:, axis] = np.bincount(assignment, weights=pts[:, axis],
                                            minlength=n_seeds)
            seed_normal[:, axis] = np.bincount(
                assignment, weights=cloud.normals[:, axis], minlength=n_seeds)
            if has_color:
                seed_color[:, axis] = np.bincount(
                    assignment, weights=colors[:, axis], minlength=n_seeds)
        safe = np.maximum(counts, 1.0)[:, None]
        seed_pos[:] = seed_pos / safe
        fallback = cloud.normals[np.minimum(first_idx, n - 1)]
        seed_normal[:] = _normalize_rows(seed_normal / safe, fallback)
        if has_color:
            seed_color[:] = seed_color / safe
        return occupied

    occupied = refresh_seeds()
    gate = np.float32(2.0 * seed_resolution)
    k_cand = min(_CANDIDATE_SEEDS, n_seeds)

    # Candidate seeds per point are fixed up front (seed centroids drift far
    # less than the gate between iterations); scores track the moving seeds.
    tree = cKDTree(seed_pos)
    _, cand = tree.query(pts, k=k_cand)
    cand = cand.reshape(n, k_cand)

    # Scoring runs in float32: plenty for clustering, half the memory traffic.
    pts32 = pts.astype(np.float32)
    normals32 = cloud.normals.astype(np.float32)
    colors32 = colors.astype(np.float32) if has_color else None

    for _ in range(max_iterations):
        delta = pts32[:, None, :] - seed_pos.astype(np.float32)[cand]
        dist = np.sqrt(np.einsum("nki,nki->nk", delta, delta))
        valid = (dist <= gate) & occupied[cand]

        score = np.float32(w_spatial / seed_resolution) * dist
        score += np.float32(w_normal) * (1.0 - np.einsum(
            "ni,nki->nk", normals32, seed_normal.astype(np.float32)[cand]))
        if has_color:
            cdelta = colors32[:, None, :] - seed_color.astype(np.float32)[cand]
            score += np.float32(w_color / _COLOR_NORM) * np.sqrt(
                np.einsum("nki,nki->nk", cdelta, cdelta))
        score = np.where(valid, score, np.float32(np.inf))

        best = score.min(axis=1)
        # Among equal-score candidates take the lowest seed id.
        tied = score <= best[:, None]
        choice = np.where(tied, cand, np.iinfo(np.int64).max).min(axis=1)
        # Points with no live seed inside the gate keep the nearest live one.
        stranded = ~valid.any(axis=1)
        if np.any(stranded):
            live_dist = np.where(occupied[cand], dist, np.float32(np.inf))
            choice[stranded] = cand[stranded, np.argmin(live_dist[stranded], axis=1)]

        changed = int(np.count_nonzero(choice != assignment))
        assignment = choice
        if changed == 0:
            break
        occupied = refresh_seeds()
        # Boundary points can flip between equivalent seeds forever; once
        # under 0.5% of points move, further rounds change nothing real.
        if changed <= max(1, n // 200):
            break

    # Final supervoxels in seed (cell) order, ids renumbered densely.
    supervoxels = []
    order = np.argsort(assignment, kind="stable")
    bounds = np.searchsorted(assignment[order], np.arange(n_seeds + 1))
    for s in range(n_seeds):
        members = order[bounds[s]:bounds[s + 1]]
        if len(members) == 0:
            continue
        members = np.sort(members)
        centroid = pts[members].mean(axis=0)
        normal = cloud.normals[members].mean(axis=0)
        norm = np.linalg.norm(normal)
        if norm > 1e-12:
            normal = normal / norm
        else:
            nearest = members[np.argmin(np.linalg.norm(pts[members] - centroid, axis=1))]
            normal = cloud.normals[nearest]
        mean_color = colors[members].mean(axis=0) if has_color else None
        supervoxels.append(Supervoxel(
            id=len(supervoxels),
            point_indices=members,
            centroid=centroid,
            normal=normal,
            mean_color=mean_color,
        ))
    return supervoxels


def build_adjacency(
    supervoxels: List[Supervoxel],
    cloud: PointCloud,
    contact_distance: Optional[float] = None,
) -> SegmentGraph:
    """Connect supervoxels whose member points come within contact_distance.

    The default contact distance is twice the cloud's median point spacing.
    Weights are left unset.
    """
    if contact_distance is None:
        contact_distance = 2.0 * median_point_spacing(cloud.points)
    if contact_distance <= 0:
        raise ValueError("contact_distance must be positive")

    labels = np.full(len(cloud), -1, dtype=np.int64)
    for sv in supervoxels:
        labels[sv.point_indices] = sv.id

    assigned = np.flatnonzero(labels >= 0)
    if len(assigned) == 0 or len(supervoxels) < 2:
        return SegmentGraph(nodes=list(supervoxels),
                            edge_index=np.zeros((0, 2), dtype=np.int64),
                            cloud=cloud)

    tree = cKDTree(cloud.points[assigned])
    pairs = tree.query_pairs(contact_distance, output_type="ndarray")
    if len(pairs):
        li = labels[assigned[pairs[:, 0]]]
        lj = labels[assigned[pairs[:, 1]]]
        cross = li != lj
        lo = np.minimum(li[cross], lj[cross])
        hi = np.maximum(li[cross], lj[cross])
        edge_index = np.unique(np.stack([lo, hi], axis=1), axis=0)
    else:
        edge_index = np.zeros((0, 2), dtype=np.int64)
    return SegmentGraph(nodes=list(supervoxels), edge_index=edge_index, cloud=cloud)
