"""Beam model of free space and the left/right split of curb candidates.

Each azimuth bin ("beam") measures the horizontal distance to the closest
non-ground point. The longest smoothed beams ahead of and behind the vehicle
give the road direction; feature points are split by which side of that
polyline they fall on.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .kitti_io import PointCloud


@dataclass(frozen=True)
class BeamConfig:
    n_beams: int = 360
    max_range: float = 50.0
    smoothing_window: int = 5
    min_separation: float = float(np.pi / 3)


@dataclass(frozen=True, eq=False)
class BeamModel:
    lengths: np.ndarray
    max_range: float
    origin: tuple[float, float] = (0.0, 0.0)

    @property
    def n_beams(self) -> int:
        return len(self.lengths)

    @property
    def width(self) -> float:
        return 2 * np.pi / self.n_beams

    @property
    def azimuths(self) -> np.ndarray:
        """Beam centre azimuths; beam ``b`` covers ``[-pi + b w, -pi + (b + 1) w)``."""
        return -np.pi + (np.arange(self.n_beams) + 0.5) * self.width


@dataclass(frozen=True)
class RoadSegmentationLine:
    direction_front: float
    direction_rear: float
    fallback_front: bool = False
    fallback_rear: bool = False


def _wrap(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def beam_index(azimuth: np.ndarray, n_beams: int) -> np.ndarray:
    b = np.floor((_wrap(azimuth) + np.pi) / (2 * np.pi) * n_beams).astype(np.int64)
    return np.clip(b, 0, n_beams - 1)


def build_beam_model(non_ground: PointCloud, n_beams: int = 360, max_range: float = 50.0, origin=(0.0, 0.0)) -> BeamModel:
    if n_beams < 8:
        raise ValueError("n_beams must be >= 8")
    lengths = np.full(n_beams, float(max_range))
    if len(non_ground):
        xy = non_ground.xyz[:, :2].astype(np.float64) - np.asarray(origin)
        dist = np.hypot(xy[:, 0], xy[:, 1])
        b = beam_index(np.arctan2(xy[:, 1], xy[:, 0]), n_beams)
        ok = dist > 0
        np.minimum.at(lengths, b[ok], np.minimum(dist[ok], max_range))
    return BeamModel(lengths, float(max_range), tuple(origin))


def _circular_moving_average(x: np.ndarray, window: int) -> np.ndarray:
    if window <= 1:
        return x.astype(np.float64)
    half = window // 2
    padded = np.concatenate([x[-half:], x, x[: window - half - 1]]) if half else np.concatenate([x, x[: window - 1]])
    c = np.r_[0.0, np.cumsum(padded, dtype=np.float64)]
    return (c[window:] - c[:-window]) / window


def find_dominant_extremes(model: BeamModel, min_separation: float = np.pi / 3, smoothing_window: int = 5) -> RoadSegmentationLine:
    """Highest local maxima of the smoothed beam lengths in the front and rear half-planes.

    A plateau of equal beams narrower than ``min_separation`` counts as one
    maximum at its centre; wider plateaus (open space) and equal maxima
    resolve toward the heading (azimuth 0 ahead, pi behind). A half-plane without a maximum falls
    back to its heading direction and is flagged.
    """
    sm = _circular_moving_average(model.lengths, smoothing_window)
    n = len(sm)
    tol = 1e-9 * max(1.0, float(np.abs(sm).max()))
    is_max = (sm >= np.roll(sm, 1) - tol) & (sm >= np.roll(sm, -1) - tol)
    az = model.azimuths
    front_half = np.abs(az) < np.pi / 2

    def best(mask: np.ndarray, heading: float, exclude: float | None):
        ok = mask & is_max
        if exclude is not None:
            ok &= np.abs(_wrap(az - exclude)) >= min_separation
        if not ok.any():
            return None
        top = sm[ok].max()
        tied = ok & (sm >= top - tol)
        # contiguous runs of tied beams (circular); a run narrower than
        # min_separation is one peak at its centre, wider runs are open space
        # and resolve to their beam nearest the heading
        starts = np.flatnonzero(tied & ~np.roll(tied, 1))
        if len(starts) == 0:  # the whole circle ties
            return float(heading)
        picks = []
        for s0 in starts:
            run = [(s0 + k) % n for k in range(n)]
            run = run[: next((k for k, b in enumerate(run) if not tied[b]), n)]
            if len(run) * model.width < min_separation:
                picks.append(_wrap(az[s0] + (len(run) - 1) / 2 * model.width))
            else:
                picks.append(az[run][np.argmin(np.abs(_wrap(az[run] - heading)))])
        picks = np.array(picks, dtype=np.float64)
        return float(picks[np.argmin(np.abs(_wrap(picks - heading)))])

    front = best(front_half, 0.0, None)
    rear = best(~front_half, np.pi, front)
    ff, rf = front is None, rear is None
    if ff:
        front = 0.0
    if rf:
        rear = float(np.pi)
    return RoadSegmentationLine(front, rear, ff, rf)


def is_left(xy: np.ndarray, line: RoadSegmentationLine) -> np.ndarray:
    """Left/right side of the rear -> origin -> front polyline for each xy point.

    Points on the line count as right.
    """
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    az = np.arctan2(xy[:, 1], xy[:, 0])
    use_front = np.abs(_wrap(az - line.direction_front)) <= np.abs(_wrap(az - line.direction_rear))
    # travel direction along the polyline: towards the front extreme, away from the rear one
    dx = np.where(use_front, np.cos(line.direction_front), -np.cos(line.direction_rear))
    dy = np.where(use_front, np.sin(line.direction_front), -np.sin(line.direction_rear))
    cross = dx * xy[:, 1] - dy * xy[:, 0]
    return cross > 0


def split_left_right(features: list, line: RoadSegmentationLine) -> tuple[list, list]:
    if not features:
        return [], []
    xy = np.array([f.point[:2] for f in features])
    mask = is_left(xy, line)
    return [f for f, m in zip(features, mask) if m], [f for f, m in zip(features, mask) if not m]


def write_beam_csv(path: str | os.PathLike, model: BeamModel) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["azimuth", "length"])
        for a, l in zip(model.azimuths, model.lengths):
            wr.writerow([f"{a:.6f}", f"{l:.4f}"])
