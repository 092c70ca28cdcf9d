"""Pinhole projection of sensor-frame points into the rectified camera image."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .kitti_io import Calibration, PointCloud

MIN_DEPTH = 1e-6


class PixelSample(NamedTuple):
    u: float
    v: float
    depth: float  # rectified camera z, meters
    altitude: float  # sensor-frame z of the source point


class ProjectedArrays(NamedTuple):
    """Column-wise projection result; ``index`` refers back into the cloud."""

    index: np.ndarray
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    altitude: np.ndarray

    def __len__(self) -> int:
        return len(self.index)


def project_point(calib: Calibration, p) -> PixelSample | None:
    x = np.array([p[0], p[1], p[2], 1.0], dtype=np.float64)
    cam = calib.velo_to_rect @ x
    y = calib.projection @ cam
    if cam[2] <= MIN_DEPTH or y[2] <= MIN_DEPTH:
        return None
    return PixelSample(float(y[0] / y[2]), float(y[1] / y[2]), float(cam[2]), float(p[2]))


def _project_all(calib: Calibration, xyz: np.ndarray):
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    M = calib.velo_to_image
    C = calib.velo_to_rect
    depth = xyz @ C[2, :3] + C[2, 3]
    # row 3 of the projection is [0 0 1 t] with t a few millimetres at most
    w = xyz @ M[2, :3] + M[2, 3]
    valid = (depth > MIN_DEPTH) & (w > MIN_DEPTH)
    safe_w = np.where(valid, w, 1.0)
    u = (xyz @ M[0, :3] + M[0, 3]) / safe_w
    v = (xyz @ M[1, :3] + M[1, 3]) / safe_w
    return u, v, depth, valid


def frustum_mask(calib: Calibration, xyz: np.ndarray) -> np.ndarray:
    u, v, _, valid = _project_all(calib, xyz)
    return valid & (u >= 0) & (u < calib.image_width) & (v >= 0) & (v < calib.image_height)


def project_arrays(calib: Calibration, xyz: np.ndarray) -> ProjectedArrays:
    """Vectorised :func:`project_cloud`: in-bounds samples, input order kept."""
    xyz = np.asarray(xyz)
    u, v, w, valid = _project_all(calib, xyz)
    keep = valid & (u >= 0) & (u < calib.image_width) & (v >= 0) & (v < calib.image_height)
    idx = np.flatnonzero(keep)
    return ProjectedArrays(idx, u[idx], v[idx], w[idx], np.asarray(xyz[idx, 2], dtype=np.float64))


def project_cloud(calib: Calibration, cloud: PointCloud) -> list[tuple[int, PixelSample]]:
    pa = project_arrays(calib, cloud.xyz)
    return [
        (int(i), PixelSample(float(u), float(v), float(d), float(a)))
        for i, u, v, d, a in zip(pa.index, pa.u, pa.v, pa.depth, pa.altitude)
    ]


def make_calibration(
    focal: float = 721.5377,
    cu: float = 609.5593,
    cv: float = 172.854,
    baseline_term: float = 44.85728,
    image_width: int = 1242,
    image_height: int = 375,
    cam_offset=(0.27, 0.0, -0.08),
) -> Calibration:
    """KITTI-like calibration: camera looks along sensor +x.

    ``cam_offset`` is the camera centre expressed in the sensor frame (meters).
    """
    P = np.array(
        [[focal, 0.0, cu, baseline_term], [0.0, focal, cv, 0.0], [0.0, 0.0, 1.0, 0.0]]
    )
    # sensor (x fwd, y left, z up) -> camera (x right, y down, z fwd)
    R = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ np.asarray(cam_offset, dtype=np.float64)
    return Calibration(P, np.eye(4), T, image_width, image_height)
