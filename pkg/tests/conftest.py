import numpy as np
import pytest

from objmap.geometry import PointCloud


def plane_cloud(n_side=20, z=1.0, spacing=0.005, origin=(0.0, 0.0)):
    """Regular grid on the plane z=const, in camera coordinates."""
    xs = origin[0] + spacing * np.arange(n_side)
    ys = origin[1] + spacing * np.arange(n_side)
    xx, yy = np.meshgrid(xs, ys)
    pts = np.stack([xx.ravel(), yy.ravel(), np.full(xx.size, z)], axis=1)
    return PointCloud(pts)


def sphere_cloud(center, radius, n=2000, seed=0):
    """Uniform random samples on a sphere surface."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1)[:, None]
    return PointCloud(np.asarray(center) + radius * v)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
