import functools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from adicurb.kitti_io import Calibration
from adicurb.projection import make_calibration

settings.register_profile(
    "default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def simple_calibration(f=100.0, cu=50.0, cv=50.0, bx=0.0, width=100, height=100) -> Calibration:
    """Identity extrinsics: sensor coordinates are camera coordinates."""
    P = np.array([[f, 0, cu, bx], [0, f, cv, 0], [0, 0, 1, 0]], dtype=np.float64)
    return Calibration(P, np.eye(4), np.eye(4), width, height)


@pytest.fixture
def calib_simple():
    return simple_calibration()


@pytest.fixture(scope="session")
def kitti_calib():
    return make_calibration()


@functools.lru_cache(maxsize=None)
def suite_scene(i: int):
    from adicurb.synth import generate_scene, scene_suite

    return generate_scene(scene_suite(i + 1)[i])
