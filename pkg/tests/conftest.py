import numpy as np
import pytest

from posevote.cloud import PointCloud, mesh_vertex_normals
from posevote.synthetic import blob_mesh, icosphere


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_unit(rng, n=None):
    v = rng.normal(size=(3,) if n is None else (n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def blob():
    """0.25 m asymmetric blob as an oriented cloud."""
    return mesh_vertex_normals(blob_mesh(0.25, subdivisions=4, seed=3))


@pytest.fixture(scope="session")
def sphere_cloud():
    mesh = icosphere(4, radius=0.1)
    return PointCloud(mesh.vertices, mesh.vertices / 0.1)
