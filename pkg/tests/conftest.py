import math
import sys
from pathlib import Path

import numpy as np
import pytest

SRC = Path(__file__).resolve().parents[1] / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from surface_geometry import PointCloud  # noqa: E402
from synthetic_truth import PhantomSpec  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_cylinder_cloud(radius=25.0, n_theta=180, z_values=None, theta_span=2 * math.pi, rng=None, n_random=None):
    """Points on x^2 + y^2 = r^2 with exact outward normals; regular grid or random samples."""
    if z_values is None:
        z_values = np.arange(16) * 0.5
    z_values = np.asarray(z_values, dtype=np.float64)
    if n_random is not None:
        theta = rng.uniform(0.0, theta_span, n_random)
        z = rng.uniform(z_values.min(), z_values.max(), n_random)
    else:
        endpoint = theta_span < 2 * math.pi
        t = np.linspace(0.0, theta_span, n_theta, endpoint=endpoint)
        theta, z = (a.ravel() for a in np.meshgrid(t, z_values, indexing="ij"))
    pts = np.column_stack([radius * np.cos(theta), radius * np.sin(theta), z])
    normals = np.column_stack([np.cos(theta), np.sin(theta), np.zeros_like(theta)])
    return PointCloud(pts, normals=normals)


def make_sphere_cloud(radius=30.0, n=3000):
    """Fibonacci sphere with exact outward normals."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = math.pi * (1.0 + 5 ** 0.5) * i
    unit = np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])
    return PointCloud(radius * unit, normals=unit)


@pytest.fixture
def cylinder_cloud():
    return make_cylinder_cloud


@pytest.fixture
def sphere_cloud():
    return make_sphere_cloud


@pytest.fixture
def small_phantom():
    """Phantom small enough for unit tests; same wall geometry as the default."""
    return PhantomSpec(dims=(96, 96, 21), spacing=(0.63, 0.63, 1.0), noise_sigma=0.0, blur_sigma_voxels=0.0)
