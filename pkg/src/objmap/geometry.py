"""Core geometric types: point clouds, rigid transforms, voxel filters, k-d trees.

Points are float64 numpy arrays of shape (3,) in meters; clouds store an
(N, 3) array. All types are immutable after construction and all operations
are pure functions, so everything here is safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import ValidationError

_UNIT_TOL = 1e-6
_ORTHO_TOL = 1e-9


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValidationError(f"points must be (N, 3), got {pts.shape}")
    return pts


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3D points with optional colors and normals.

    colors are uint8 RGB triples, normals are unit vectors; both are parallel
    to `points` when present. `organized_shape` is (width, height) in pixels
    when the cloud came from a per-pixel depth projection.
    """

    points: np.ndarray
    colors: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    organized_shape: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        pts = _as_points(self.points)
        object.__setattr__(self, "points", pts)
        if not np.all(np.isfinite(pts)):
            raise ValidationError("cloud contains non-finite coordinates")
        n = len(pts)
        if self.colors is not None:
            cols = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(cols) != n:
                raise ValidationError(f"{len(cols)} colors for {n} points")
            object.__setattr__(self, "colors", cols)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != n:
                raise ValidationError(f"{len(nrm)} normals for {n} points")
            lengths = np.linalg.norm(nrm, axis=1)
            if n and np.max(np.abs(lengths - 1.0), initial=0.0) > _UNIT_TOL:
                raise ValidationError("normals must be unit length")
            object.__setattr__(self, "normals", nrm)
        if self.organized_shape is not None:
            w, h = self.organized_shape
            if w * h < n:
                raise ValidationError(
                    f"organized shape {w}x{h} smaller than point count {n}"
                )
            object.__setattr__(self, "organized_shape", (int(w), int(h)))

    def __len__(self) -> int:
        return len(self.points)

    def centroid(self) -> np.ndarray:
        if len(self.points) == 0:
            raise ValidationError("centroid of an empty cloud is undefined")
        return self.points.mean(axis=0)


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform: p_world = rotation @ p_cam + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise ValidationError(f"rotation not orthonormal (max error {err:.3g})")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise ValidationError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quaternion(cls, qx, qy, qz, qw, translation) -> "Pose":
        rot = Rotation.from_quat([qx, qy, qz, qw]).as_matrix()
        # Re-orthonormalize so tiny quaternion rounding never trips validation.
        u, _, vt = np.linalg.svd(rot)
        return cls(u @ vt, translation)

    def to_quaternion(self) -> np.ndarray:
        """Quaternion as (qx, qy, qz, qw), w kept non-negative."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def inverse(self) -> "Pose":
        rot_inv = self.rotation.T
        return Pose(rot_inv, -rot_inv @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self * other)(p) = self(other(p))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            return self.rotation @ pts + self.translation
        return pts @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Trajectory:
    """Per-keyframe timestamps and poses, keyed by keyframe id."""

    entries: dict = field(default_factory=dict)  # keyframe_id -> (timestamp, Pose)

    def __post_init__(self):
        ids = sorted(self.entries)
        times = [self.entries[i][0] for i in ids]
        for a, b in zip(times, times[1:]):
            if b <= a:
                raise ValidationError("timestamps must increase with keyframe id")
        object.__setattr__(self, "entries", dict(self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, keyframe_id: int) -> bool:
        return keyframe_id in self.entries

    def keyframe_ids(self):
        return sorted(self.entries)

    def pose(self, keyframe_id: int) -> Pose:
        return self.entries[keyframe_id][1]

    def timestamp(self, keyframe_id: int) -> float:
        return self.entries[keyframe_id][0]


class SpatialIndex:
    """Immutable k-d tree over one cloud's points.

    Nearest-neighbor results match a brute-force scan exactly: distances are
    recomputed with the same numpy arithmetic the scan would use, and ties
    resolve to the lowest point index.
    """

    def __init__(self, points: np.ndarray):
        pts = _as_points(points)
        if len(pts) == 0:
            raise ValidationError("cannot index an empty cloud")
        self._points = pts.copy()
        self._points.setflags(write=False)
        self._tree = cKDTree(self._points)

    def __len__(self) -> int:
        return len(self._points)

    @property
    def points(self) -> np.ndarray:
        return self._points

    def nearest(self, query) -> Tuple[float, int]:
        """Distance and index of the closest point; ties pick the lowest index."""
        q = np.asarray(query, dtype=np.float64).reshape(3)
        d0, _ = self._tree.query(q)
        radius = d0 * (1.0 + 1e-9) + 1e-12
        candidates = self._tree.query_ball_point(q, radius)
        dists = np.linalg.norm(self._points[candidates] - q, axis=1)
        best = float(dists.min())
        idx = min(int(candidates[k]) for k in np.flatnonzero(dists == best))
        return best, idx

    def nearest_distances(self, queries: np.ndarray) -> np.ndarray:
        """Vectorized nearest distances for an (M, 3) query array."""
        q = _as_points(queries)
        if len(q) == 0:
            return np.zeros(0)
        _, idx = self._tree.query(q)
        return np.linalg.norm(self._points[idx] - q, axis=1)


def build_spatial_index(cloud: PointCloud) -> SpatialIndex:
    return SpatialIndex(cloud.points)


def nearest_distance(index: SpatialIndex, query) -> float:
    return index.nearest(query)[0]


def transform_cloud(cloud: PointCloud, pose: Pose) -> PointCloud:
    """Rigidly transform a cloud; normals are rotated, colors carried over."""
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals @ pose.rotation.T
    return PointCloud(
        points=pose.apply(cloud.points),
        colors=None if cloud.colors is None else cloud.colors.copy(),
        normals=normals,
        organized_shape=cloud.organized_shape,
    )


def voxel_cells(points: np.ndarray, resolution: float) -> np.ndarray:
    """Integer cell index per point for a grid anchored at the origin."""
    return np.floor(np.asarray(points, dtype=np.float64) / resolution).astype(np.int64)


def voxel_downsample(cloud: PointCloud, resolution: float) -> PointCloud:
    """Reduce to one centroid point per occupied cubic cell.

    Cells are axis-aligned with side `resolution`, anchored at the world
    origin. Cell color is the channel-wise mean rounded to nearest integer.
    Normals are not carried over (a cell mean is not a surface normal).
    Output points are sorted by cell index.
    """
    if resolution <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    if len(cloud) == 0:
        return PointCloud(np.zeros((0, 3)))
    cells = voxel_cells(cloud.points, resolution)
    _, first, inverse = np.unique(cells, axis=0, return_index=True, return_inverse=True)
    n_cells = len(first)
    counts = np.bincount(inverse, minlength=n_cells).astype(np.float64)
    centroids = np.zeros((n_cells, 3))
    for axis in range(3):
        centroids[:, axis] = np.bincount(
            inverse, weights=cloud.points[:, axis], minlength=n_cells
        )
    centroids /= counts[:, None]
    colors = None
    if cloud.colors is not None:
        sums = np.zeros((n_cells, 3))
        for ch in range(3):
            sums[:, ch] = np.bincount(
                inverse, weights=cloud.colors[:, ch].astype(np.float64),
                minlength=n_cells,
            )
        colors = np.rint(sums / counts[:, None]).astype(np.uint8)
    return PointCloud(points=centroids, colors=colors)


def _smallest_eigenvectors(cov: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Batched smallest-eigenpair of symmetric 3x3 matrices.

    Uses the closed-form trigonometric eigenvalues plus a Cayley-Hamilton
    eigenvector; rows where that is ill-conditioned fall back to eigh.
    Returns (eigvals ascending (n, 3), unit eigenvectors (n, 3)).
    """
    q = np.trace(cov, axis1=1, axis2=2) / 3.0
    off = cov[:, 0, 1] ** 2 + cov[:, 0, 2] ** 2 + cov[:, 1, 2] ** 2
    dd = cov[:, (0, 1, 2), (0, 1, 2)] - q[:, None]
    p2 = (dd ** 2).sum(axis=1) + 2.0 * off
    p = np.sqrt(np.maximum(p2, 0.0) / 6.0)
    scale = np.maximum(np.abs(cov).max(axis=(1, 2)), 1e-300)
    iso = p <= 1e-12 * scale

    p_safe = np.where(iso, 1.0, p)
    b = (cov - q[:, None, None] * np.eye(3)) / p_safe[:, None, None]
    det_b = np.linalg.det(b)
    phi = np.arccos(np.clip(det_b / 2.0, -1.0, 1.0)) / 3.0
    lam_hi = q + 2.0 * p * np.cos(phi)
    lam_lo = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    lam_mid = 3.0 * q - lam_hi - lam_lo
    eigvals = np.stack([lam_lo, lam_mid, lam_hi], axis=1)

    # Cayley-Hamilton: columns of (C - lam_mid I)(C - lam_hi I) span the
    # lam_lo eigenspace.
    m = np.einsum("nij,njk->nik",
                  cov - lam_mid[:, None, None] * np.eye(3),
                  cov - lam_hi[:, None, None] * np.eye(3))
    norms = np.linalg.norm(m, axis=1)               # per-column norms
    best_col = np.argmax(norms, axis=1)
    vec = np.take_along_axis(m, best_col[:, None, None], axis=2)[:, :, 0]
    vec_norm = np.linalg.norm(vec, axis=1)

    # Fallback: isotropic rows or a vanishing Cayley-Hamilton column mean
    # clustered eigenvalues; eigh handles those exactly.
    bad = iso | (vec_norm <= 1e-8 * np.maximum(norms.max(axis=1), 1e-300)) \
        | (vec_norm == 0.0)
    if np.any(bad):
        ev, evec = np.linalg.eigh(cov[bad])
        eigvals[bad] = ev
        vec[bad] = evec[:, :, 0]
        vec_norm = np.linalg.norm(vec, axis=1)
    return eigvals, vec / np.maximum(vec_norm, 1e-300)[:, None]


def estimate_normals(cloud: PointCloud, k_neighbors: int = 10) -> Tuple[PointCloud, int]:
    """Per-point unit normals from the covariance of the k nearest neighbors.

    The neighborhood includes the point itself. Each normal is the
    smallest-eigenvalue eigenvector, sign-flipped to face the sensor origin.
    Degenerate neighborhoods (rank < 2) fall back to the sensor-facing axis;
    their count is returned alongside the cloud.
    """
    n = len(cloud)
    if not 3 <= k_neighbors <= n:
        raise ValueError(f"need 3 <= k_neighbors <= {n}, got {k_neighbors}")
    tree = cKDTree(cloud.points)
    _, idx = tree.query(cloud.points, k=k_neighbors)
    neigh = cloud.points[idx]                       # (n, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k_neighbors
    eigvals, normals = _smallest_eigenvectors(cov)

    # rank < 2: second eigenvalue vanishes relative to the largest.
    scale = eigvals[:, 2]
    degenerate = (scale <= 0) | (eigvals[:, 1] <= 1e-7 * np.maximum(scale, 1e-300))

    to_sensor = -cloud.points
    norms = np.linalg.norm(to_sensor, axis=1)
    sensor_axis = np.where(
        norms[:, None] > 0, to_sensor / np.maximum(norms, 1e-300)[:, None],
        np.array([0.0, 0.0, -1.0]),
    )
    flip = np.einsum("ni,ni->n", normals, to_sensor) < 0
    normals[flip] *= -1.0
    normals[degenerate] = sensor_axis[degenerate]
    normals /= np.linalg.norm(normals, axis=1)[:, None]

    out = PointCloud(
        points=cloud.points.copy(),
        colors=None if cloud.colors is None else cloud.colors.copy(),
        normals=normals,
        organized_shape=cloud.organized_shape,
    )
    return out, int(np.count_nonzero(degenerate))


def median_point_spacing(points: np.ndarray) -> float:
    """Median nearest-neighbor distance; the cloud's natural sampling pitch."""
    pts = _as_points(points)
    if len(pts) < 2:
        raise ValidationError("need at least two points to measure spacing")
    tree = cKDTree(pts)
    d, _ = tree.query(pts, k=2)
    return float(np.median(d[:, 1]))
