import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adicurb.beam_classify import (
    BeamModel,
    RoadSegmentationLine,
    build_beam_model,
    find_dominant_extremes,
    is_left,
    split_left_right,
    write_beam_csv,
)
from adicurb.curb_features import FeaturePoint
from adicurb.kitti_io import PointCloud


def corridor(half_width=6.0, length=60.0, angle=0.0, step=0.2):
    x = np.arange(-length, length, step)
    pts = np.vstack([np.column_stack([x, np.full_like(x, s * half_width), np.zeros_like(x)]) for s in (1, -1)])
    c, s = np.cos(angle), np.sin(angle)
    pts[:, :2] = pts[:, :2] @ np.array([[c, s], [-s, c]])
    return PointCloud.from_xyz(pts)


def feature(x, y):
    return FeaturePoint((x, y, -1.6), 0, 0, frozenset())


class TestBeamModel:
    def test_empty_all_max(self):
        m = build_beam_model(PointCloud.empty(), 360, 50.0)
        assert (m.lengths == 50.0).all()

    def test_single_obstacle(self):
        m = build_beam_model(PointCloud.from_xyz([[10.0, 0.0, 0.5]]), 360, 50.0)
        assert m.lengths[180] == pytest.approx(10.0)
        assert m.lengths[179] == m.lengths[181] == 50.0
        assert (m.lengths == 50.0).sum() == 359

    def test_too_few_beams(self):
        with pytest.raises(ValueError):
            build_beam_model(PointCloud.empty(), 4)

    def test_corridor_longest_along_axis(self):
        m = build_beam_model(corridor(), 360, 50.0)
        assert m.lengths[180] == 50.0 and m.lengths[0] == 50.0
        assert m.lengths[265:275].min() == pytest.approx(6.0, abs=0.01)

    def test_lengths_in_range(self):
        m = build_beam_model(corridor(), 90, 30.0)
        assert (m.lengths > 0).all() and (m.lengths <= 30.0).all()

    @given(st.lists(st.tuples(st.floats(-40, 40), st.floats(-40, 40)), min_size=1, max_size=30))
    def test_adding_obstacles_never_lengthens(self, extra):
        base = corridor(step=1.0)
        more = PointCloud.from_xyz(np.vstack([base.xyz, [[x, y, 0.0] for x, y in extra]]))
        a = build_beam_model(base, 120, 50.0).lengths
        b = build_beam_model(more, 120, 50.0).lengths
        assert (b <= a).all()


class TestExtremes:
    def test_corridor_directions(self):
        line = find_dominant_extremes(build_beam_model(corridor(), 360, 50.0))
        width = 2 * np.pi / 360
        assert abs(line.direction_front) <= width
        assert np.pi - abs(line.direction_rear) <= width
        assert not (line.fallback_front or line.fallback_rear)

    def test_uniform_model_prefers_heading(self):
        line = find_dominant_extremes(BeamModel(np.full(360, 50.0), 50.0))
        assert abs(line.direction_front) <= np.pi / 360
        assert np.pi - abs(line.direction_rear) <= np.pi / 360

    def test_rotated_corridor(self):
        angle = np.deg2rad(20)
        line = find_dominant_extremes(build_beam_model(corridor(angle=angle), 360, 50.0))
        assert abs(line.direction_front - angle) <= 2 * np.pi / 360

    def test_no_front_maximum_falls_back(self):
        lengths = np.full(36, 5.0)
        az = -np.pi + (np.arange(36) + 0.5) * 2 * np.pi / 36
        lengths[np.abs(az) < np.pi / 2] = np.linspace(1, 2, (np.abs(az) < np.pi / 2).sum())
        line = find_dominant_extremes(BeamModel(lengths, 50.0), smoothing_window=1)
        assert line.fallback_front and line.direction_front == 0.0

    @given(st.floats(0.01, 100))
    def test_scale_invariant(self, lam):
        m = build_beam_model(corridor(angle=0.3, step=0.5), 180, 50.0)
        a = find_dominant_extremes(m)
        b = find_dominant_extremes(BeamModel(m.lengths * lam, m.max_range * lam))
        assert (a.direction_front, a.direction_rear) == (b.direction_front, b.direction_rear)


class TestSplit:
    line = RoadSegmentationLine(0.0, np.pi)

    def test_sign_convention(self):
        left, right = split_left_right([feature(5, 2), feature(5, -2)], self.line)
        assert [f.point[1] for f in left] == [2] and [f.point[1] for f in right] == [-2]

    def test_behind_vehicle(self):
        left, right = split_left_right([feature(-5, 2), feature(-5, -2)], self.line)
        assert [f.point[1] for f in left] == [2]

    def test_on_line_goes_right(self):
        assert not is_left(np.array([[7.0, 0.0]]), self.line)[0]

    def test_empty(self):
        assert split_left_right([], self.line) == ([], [])

    @given(
        st.lists(st.tuples(st.floats(-30, 30), st.floats(-30, 30)), min_size=1, max_size=40),
        st.floats(-np.pi, np.pi),
    )
    def test_rotation_equivariant_and_complete(self, pts, theta):
        line = RoadSegmentationLine(0.1, np.pi - 0.2)
        xy = np.array(pts)
        c, s = np.cos(theta), np.sin(theta)
        rot = xy @ np.array([[c, s], [-s, c]])
        rline = RoadSegmentationLine(line.direction_front + theta, line.direction_rear + theta)
        a = is_left(xy, line)
        b = is_left(rot, rline)
        # skip points numerically on the line
        az = np.arctan2(xy[:, 1], xy[:, 0])
        clear = (np.abs(np.sin(az - 0.1)) > 1e-6) & (np.abs(np.sin(az - np.pi + 0.2)) > 1e-6) & (np.hypot(*xy.T) > 1e-6)
        np.testing.assert_array_equal(a[clear], b[clear])
        left, right = split_left_right([feature(x, y) for x, y in pts], line)
        assert len(left) + len(right) == len(pts)


def test_beam_csv(tmp_path):
    write_beam_csv(tmp_path / "b.csv", BeamModel(np.full(8, 3.0), 50.0))
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "azimuth,length" and len(lines) == 9
