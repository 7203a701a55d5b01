import numpy as np
import pytest

from cylkern.pointcloud import PointCloud, gen_synthetic, normalize_unit_sphere


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture(scope="session")
def blob_cloud():
    """Generic-position random cloud with random unit normals."""
    rng = np.random.default_rng(7)
    pts = rng.standard_normal((160, 3))
    nrm = rng.standard_normal((160, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return normalize_unit_sphere(PointCloud(pts, nrm))


@pytest.fixture(scope="session")
def torus_cloud():
    return normalize_unit_sphere(gen_synthetic("torus", 256, 0.01, 42))


@pytest.fixture(scope="session")
def composite_cloud():
    return normalize_unit_sphere(gen_synthetic("composite", 192, 0.01, 3))
