import numpy as np
import pytest

from mpcnet.pointcloud import ClassSpec, MultispectralPointCloud, SceneSpec, generate_synthetic_scene


def two_class_spec(n=100, label_rate=1.0, seed=0):
    return SceneSpec([ClassSpec("a", n, 1.0, (0.2, 0.3, 0.4)),
                      ClassSpec("b", n, 2.0, (0.7, 0.6, 0.5))],
                     label_rate=label_rate, noise_sigma=0.05, extent=20.0, seed=seed)


@pytest.fixture
def small_cloud():
    return generate_synthetic_scene(two_class_spec())


@pytest.fixture
def cube_cloud():
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    return MultispectralPointCloud(corners, np.full((8, 2), 0.5), np.arange(8) % 2, ("a", "b"))


def three_class_spec(seed=3):
    """Small, well separated 3-class scene used for convergence checks."""
    return SceneSpec([ClassSpec("ground", 700, 3.0, (0.3, 0.5, 0.4)),
                      ClassSpec("tree", 500, 2.0, (0.2, 0.7, 0.3)),
                      ClassSpec("roof", 400, 1.5, (0.6, 0.4, 0.5))],
                     label_rate=1.0, noise_sigma=0.05, extent=3.0, seed=seed)
