import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adicurb.kitti_io import PointCloud
from adicurb.projection import frustum_mask, project_arrays, project_cloud, project_point

from .conftest import simple_calibration


def test_principal_point(calib_simple):
    s = project_point(calib_simple, (0, 0, 5))
    assert (s.u, s.v, s.depth) == (50.0, 50.0, 5.0)


def test_hand_evaluated_offset(calib_simple):
    s = project_point(calib_simple, (1, 0, 5))
    assert s.u == pytest.approx(70.0, abs=1e-12) and s.v == 50.0


def test_behind_camera_is_none(calib_simple):
    assert project_point(calib_simple, (0, 0, -1)) is None
    assert project_point(calib_simple, (0, 0, 1e-7)) is None


def test_altitude_is_sensor_z(kitti_calib):
    s = project_point(kitti_calib, (10.0, 0.5, -1.7))
    assert s.altitude == -1.7
    # camera sits 0.27 m ahead of the sensor along x
    assert s.depth == pytest.approx(9.73)


def test_empty_and_all_behind(calib_simple):
    assert project_cloud(calib_simple, PointCloud.empty()) == []
    behind = PointCloud.from_xyz([[0, 0, -2.0], [1, 1, -5.0]])
    assert project_cloud(calib_simple, behind) == []


def test_matches_pointwise_loop(kitti_calib):
    rng = np.random.default_rng(3)
    cloud = PointCloud.from_xyz(rng.uniform([-20, -20, -3], [40, 20, 2], size=(500, 3)))
    expected = []
    for i, p in enumerate(cloud.xyz):
        s = project_point(kitti_calib, p)
        if s is not None and 0 <= s.u < kitti_calib.image_width and 0 <= s.v < kitti_calib.image_height:
            expected.append((i, s))
    got = project_cloud(kitti_calib, cloud)
    assert [i for i, _ in got] == [i for i, _ in expected]
    for (_, a), (_, b) in zip(got, expected):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-9)


def test_arrays_agree_with_mask(kitti_calib):
    rng = np.random.default_rng(4)
    xyz = rng.uniform(-30, 30, size=(300, 3))
    pa = project_arrays(kitti_calib, xyz)
    np.testing.assert_array_equal(pa.index, np.flatnonzero(frustum_mask(kitti_calib, xyz)))


@given(
    st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.5, 20)),
    st.floats(0.1, 50),
)
def test_scale_invariance(p, lam):
    calib = simple_calibration()
    a = project_point(calib, p)
    b = project_point(calib, tuple(lam * c for c in p))
    assert a.u == pytest.approx(b.u, rel=1e-9, abs=1e-9)
    assert a.v == pytest.approx(b.v, rel=1e-9, abs=1e-9)


@given(st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.5, 20)), st.floats(-30, 30))
def test_principal_point_shift(p, delta):
    a = project_point(simple_calibration(), p)
    b = project_point(simple_calibration(cu=50.0 + delta), p)
    assert b.u - a.u == pytest.approx(delta, abs=1e-9)
    assert b.v == a.v
