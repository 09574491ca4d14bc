import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from objmap.errors import ValidationError
from objmap.geometry import (PointCloud, Pose, SpatialIndex, Trajectory,
                             build_spatial_index, estimate_normals,
                             median_point_spacing, nearest_distance,
                             transform_cloud, voxel_cells, voxel_downsample)

from conftest import plane_cloud, sphere_cloud


# --- PointCloud / Pose validation -----------------------------------------

def test_cloud_rejects_nan():
    with pytest.raises(ValidationError):
        PointCloud(np.array([[0.0, 0.0, np.nan]]))


def test_cloud_rejects_mismatched_colors():
    with pytest.raises(ValidationError):
        PointCloud(np.zeros((2, 3)), colors=np.zeros((3, 3), dtype=np.uint8))


def test_cloud_rejects_non_unit_normals():
    with pytest.raises(ValidationError):
        PointCloud(np.zeros((1, 3)), normals=np.array([[0.0, 0.0, 0.5]]))


def test_cloud_organized_shape_bound():
    with pytest.raises(ValidationError):
        PointCloud(np.zeros((5, 3)), organized_shape=(2, 2))


def test_pose_rejects_non_orthonormal():
    with pytest.raises(ValidationError):
        Pose(np.eye(3) * 2.0, np.zeros(3))


def test_pose_rejects_reflection():
    m = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValidationError):
        Pose(m, np.zeros(3))


def test_trajectory_requires_increasing_timestamps():
    p = Pose.identity()
    with pytest.raises(ValidationError):
        Trajectory({0: (1.0, p), 1: (0.5, p)})


# --- transform_cloud -------------------------------------------------------

def test_transform_identity():
    cloud = plane_cloud(5)
    out = transform_cloud(cloud, Pose.identity())
    np.testing.assert_array_equal(out.points, cloud.points)


def test_transform_rot90_about_z():
    pose = Pose(np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
                np.zeros(3))
    out = transform_cloud(PointCloud(np.array([[1.0, 0.0, 0.0]])), pose)
    np.testing.assert_allclose(out.points[0], [0.0, 1.0, 0.0], atol=1e-12)


def test_transform_pure_translation():
    pose = Pose(np.eye(3), np.array([1.0, 2.0, 3.0]))
    out = transform_cloud(PointCloud(np.zeros((1, 3))), pose)
    np.testing.assert_array_equal(out.points[0], [1.0, 2.0, 3.0])


def test_transform_rotates_normals_only():
    pose = Pose(np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
                np.array([5.0, 0.0, 0.0]))
    cloud = PointCloud(np.array([[0.0, 0.0, 1.0]]),
                       normals=np.array([[1.0, 0.0, 0.0]]))
    out = transform_cloud(cloud, pose)
    np.testing.assert_allclose(out.normals[0], [0.0, 1.0, 0.0], atol=1e-12)


def test_transform_roundtrip_inverse(rng):
    pts = rng.uniform(-2, 2, size=(500, 3))
    cloud = PointCloud(pts)
    quat = rng.normal(size=4)
    quat /= np.linalg.norm(quat)
    pose = Pose.from_quaternion(*quat, rng.uniform(-1, 1, 3))
    back = transform_cloud(transform_cloud(cloud, pose), pose.inverse())
    np.testing.assert_allclose(back.points, pts, atol=1e-9)


# --- voxel_downsample ------------------------------------------------------

def test_voxel_same_cell_merges():
    cloud = PointCloud(np.array([[0.001, 0.0, 0.0], [0.002, 0.0, 0.0]]))
    out = voxel_downsample(cloud, 0.005)
    assert len(out) == 1
    np.testing.assert_allclose(out.points[0], [0.0015, 0.0, 0.0])


def test_voxel_distinct_cells_kept():
    cloud = PointCloud(np.array([[0.0, 0.0, 0.0], [0.010, 0.0, 0.0]]))
    assert len(voxel_downsample(cloud, 0.005)) == 2


def test_voxel_empty_cloud():
    out = voxel_downsample(PointCloud(np.zeros((0, 3))), 0.005)
    assert len(out) == 0


def test_voxel_rejects_bad_resolution():
    with pytest.raises(ValueError):
        voxel_downsample(plane_cloud(3), 0.0)


def test_voxel_color_mean_rounded():
    cloud = PointCloud(np.array([[0.0, 0.0, 0.0], [0.001, 0.0, 0.0]]),
                       colors=np.array([[10, 0, 255], [11, 0, 254]], dtype=np.uint8))
    out = voxel_downsample(cloud, 0.01)
    np.testing.assert_array_equal(out.colors[0], [10, 0, 254])  # 10.5 rounds even


def test_voxel_one_point_per_cell(rng):
    pts = rng.uniform(-1, 1, size=(3000, 3))
    out = voxel_downsample(PointCloud(pts), 0.03)
    cells = voxel_cells(out.points, 0.03)
    assert len(np.unique(cells, axis=0)) == len(cells)


def test_voxel_centroids_stay_in_cell(rng):
    pts = rng.uniform(-1, 1, size=(2000, 3))
    out = voxel_downsample(PointCloud(pts), 0.05)
    in_cells = set(map(tuple, voxel_cells(pts, 0.05)))
    out_cells = set(map(tuple, voxel_cells(out.points, 0.05)))
    assert out_cells == in_cells


# --- estimate_normals ------------------------------------------------------

def test_normals_on_plane_face_sensor():
    cloud = plane_cloud(10, z=1.0)
    out, degenerate = estimate_normals(cloud, 10)
    assert degenerate == 0
    np.testing.assert_allclose(out.normals,
                               np.tile([0.0, 0.0, -1.0], (len(cloud), 1)),
                               atol=1e-6)


def test_normals_on_sphere_match_analytic():
    # Oracle: the analytic sphere normal (p - c) / r, sign-insensitive.
    center = np.array([0.2, -0.1, 2.0])
    cloud = sphere_cloud(center, 0.5, n=8000, seed=3)
    out, _ = estimate_normals(cloud, 10)
    analytic = (cloud.points - center) / 0.5
    dots = np.abs(np.einsum("ij,ij->i", out.normals, analytic))
    angles = np.degrees(np.arccos(np.clip(dots, -1, 1)))
    assert np.max(angles) < 5.0


def test_normals_collinear_degenerate():
    pts = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 2.0], [0.0, 0.0, 3.0]])
    out, degenerate = estimate_normals(PointCloud(pts), 3)
    assert degenerate == 3
    # Fallback is the sensor-facing axis.
    np.testing.assert_allclose(out.normals[0], [0.0, 0.0, -1.0], atol=1e-12)


def test_normals_unit_length(rng):
    pts = rng.uniform(-1, 1, size=(300, 3))
    out, _ = estimate_normals(PointCloud(pts), 8)
    np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), 1.0,
                               atol=1e-6)


def test_normals_k_bounds():
    with pytest.raises(ValueError):
        estimate_normals(plane_cloud(2), 2)
    with pytest.raises(ValueError):
        estimate_normals(plane_cloud(2), 100)


# --- SpatialIndex ----------------------------------------------------------

def test_nearest_trivial():
    idx = SpatialIndex(np.array([[0.0, 0.0, 0.0]]))
    assert nearest_distance(idx, [0.0, 0.02, 0.0]) == pytest.approx(0.02)


def test_nearest_exact_hit():
    idx = SpatialIndex(np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]))
    assert nearest_distance(idx, [1.0, 2.0, 3.0]) == 0.0


def test_index_rejects_empty():
    with pytest.raises(ValidationError):
        build_spatial_index(PointCloud(np.zeros((0, 3))))


def test_nearest_matches_bruteforce(rng):
    # Oracle: O(n*m) scan with the same norm arithmetic.
    pts = rng.uniform(0, 1, size=(1000, 3))
    queries = rng.uniform(0, 1, size=(100, 3))
    index = SpatialIndex(pts)
    got = index.nearest_distances(queries)
    brute = np.array([np.linalg.norm(pts - q, axis=1).min() for q in queries])
    np.testing.assert_array_equal(got, brute)


def test_nearest_tie_breaks_to_lowest_index():
    pts = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    _, idx = SpatialIndex(pts).nearest([0.0, 0.0, 0.0])
    assert idx == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=5000), st.integers(0, 2 ** 31 - 1))
def test_nearest_bruteforce_property(n, seed):
    r = np.random.default_rng(seed)
    pts = r.uniform(-1, 1, size=(n, 3))
    queries = r.uniform(-1, 1, size=(10, 3))
    index = SpatialIndex(pts)
    for q in queries:
        d, i = index.nearest(q)
        dists = np.linalg.norm(pts - q, axis=1)
        assert d == dists.min()
        assert i == int(np.argmin(dists))


def test_median_point_spacing_regular_grid():
    cloud = plane_cloud(10, spacing=0.01)
    assert median_point_spacing(cloud.points) == pytest.approx(0.01)
