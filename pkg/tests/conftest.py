import numpy as np
import pytest

from nightrelight.scene_io import Intrinsics
from nightrelight.synthetic import write_synthetic_scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_intr():
    return Intrinsics(20.0, 20.0, 3.5, 3.5)


@pytest.fixture(scope="session")
def synthetic_scene(tmp_path_factory):
    """Path of a freshly written 64x64 synthetic scene JSON."""
    return write_synthetic_scene(tmp_path_factory.mktemp("scene"))
