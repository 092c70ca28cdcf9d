"""Piecewise ground-plane segmentation and removal of movable objects.

The frame is cut into equal-width slabs along x. Each slab gets its own plane,
seeded from its lowest points and refined a few rounds by total least squares
on the current inliers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .kitti_io import PointCloud

log = logging.getLogger(__name__)


class DegenerateSegmentError(ValueError):
    pass


@dataclass(frozen=True)
class GroundSegConfig:
    n_segments: int = 3
    num_lpr: int = 20
    seed_margin: float = 0.4
    n_iter: int = 3
    inlier_threshold: float = 0.2


@dataclass(frozen=True)
class DynamicObjectConfig:
    cluster_distance: float = 0.5
    min_cluster_size: int = 10
    max_length: float = 8.0
    max_width: float = 4.0
    min_height: float = 0.5
    max_height: float = 3.0
    max_bottom_gap: float = 0.5
    # ground points this close (horizontally) to a removed object are dropped too
    footprint_margin: float = 0.3


@dataclass(frozen=True)
class PlaneModel:
    normal: tuple[float, float, float]
    offset: float
    inlier_threshold: float

    def signed_distance(self, xyz: np.ndarray) -> np.ndarray:
        return np.asarray(xyz, dtype=np.float64) @ np.asarray(self.normal) + self.offset

    def height_at(self, x, y):
        """z of the plane above (x, y)."""
        nx, ny, nz = self.normal
        return -(nx * np.asarray(x) + ny * np.asarray(y) + self.offset) / nz


@dataclass(frozen=True, eq=False)
class GroundPartition:
    ground: PointCloud
    non_ground: PointCloud
    ground_index: np.ndarray
    non_ground_index: np.ndarray
    planes: tuple  # one PlaneModel per segment
    edges: np.ndarray  # segment x boundaries

    def plane_at(self, x: float) -> PlaneModel:
        k = _bin_index(np.array([x]), self.edges)[0]
        return self.planes[k]

    def height_above(self, xyz: np.ndarray) -> np.ndarray:
        """Signed distance of each point to the plane of its segment (positive = above)."""
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        k = _bin_index(xyz[:, 0], self.edges)
        out = np.empty(len(xyz))
        for s, plane in enumerate(self.planes):
            m = k == s
            out[m] = plane.signed_distance(xyz[m])
        return out


def _bin_index(x: np.ndarray, edges: np.ndarray) -> np.ndarray:
    n = len(edges) - 1
    lo, hi = edges[0], edges[-1]
    if n == 1 or hi <= lo:
        return np.zeros(len(x), np.int64)
    # a value on an interior boundary belongs to the lower bin
    k = np.ceil((np.asarray(x, dtype=np.float64) - lo) / (hi - lo) * n).astype(np.int64) - 1
    return np.clip(k, 0, n - 1)


def segment_indices(xyz: np.ndarray, n_segments: int) -> tuple[list[np.ndarray], np.ndarray]:
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    xyz = np.asarray(xyz)
    if len(xyz) == 0:
        return [np.zeros(0, np.int64) for _ in range(n_segments)], np.zeros(n_segments + 1)
    x = xyz[:, 0].astype(np.float64)
    edges = np.linspace(x.min(), x.max(), n_segments + 1)
    k = _bin_index(x, edges)
    return [np.flatnonzero(k == s) for s in range(n_segments)], edges


def split_segments(cloud: PointCloud, n_segments: int) -> list[PointCloud]:
    idx, _ = segment_indices(cloud.xyz, n_segments)
    return [cloud.subset(i) for i in idx]


def _fit_plane_tls(pts: np.ndarray, threshold: float) -> PlaneModel:
    mean = pts.mean(axis=0)
    cov = np.cov((pts - mean).T, bias=True)
    w, V = np.linalg.eigh(cov)
    if w[1] <= 1e-12 * max(w[2], 1e-300):
        # collinear (or single) support: horizontal plane through the mean height
        return PlaneModel((0.0, 0.0, 1.0), float(-mean[2]), threshold)
    n = V[:, 0]
    if n[2] < 0:
        n = -n
    n = n / np.linalg.norm(n)
    return PlaneModel(tuple(float(c) for c in n), float(-n @ mean), threshold)


def fit_ground_plane(
    segment,
    num_lpr: int = 20,
    seed_margin: float = 0.4,
    n_iter: int = 3,
    inlier_threshold: float = 0.2,
) -> PlaneModel:
    pts = np.asarray(getattr(segment, "xyz", segment), dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateSegmentError(f"degenerate segment: {len(pts)} points, need >= 3")
    z = np.sort(pts[:, 2])
    lpr = z[: max(1, min(num_lpr, len(z)))].mean()
    current = pts[pts[:, 2] <= lpr + seed_margin]
    plane = _fit_plane_tls(current, inlier_threshold)
    for _ in range(n_iter):
        dist = np.abs(plane.signed_distance(pts))
        inl = pts[dist <= inlier_threshold]
        if len(inl) < 3:
            break
        plane = _fit_plane_tls(inl, inlier_threshold)
    return plane


def segment_ground(cloud: PointCloud, cfg: GroundSegConfig = GroundSegConfig()) -> GroundPartition:
    xyz = cloud.xyz.astype(np.float64)
    seg_idx, edges = segment_indices(xyz, cfg.n_segments)
    planes: list[PlaneModel | None] = []
    for idx in seg_idx:
        try:
            planes.append(
                fit_ground_plane(xyz[idx], cfg.num_lpr, cfg.seed_margin, cfg.n_iter, cfg.inlier_threshold)
            )
        except DegenerateSegmentError:
            planes.append(None)
    fitted = [k for k, p in enumerate(planes) if p is not None]
    if not fitted:
        flat = PlaneModel((0.0, 0.0, 1.0), 0.0, cfg.inlier_threshold)
        if len(cloud):
            log.warning("no segment could be fitted; every point is non-ground")
        planes = [flat] * cfg.n_segments
        is_ground = np.zeros(len(cloud), bool)
    else:
        centres = (edges[:-1] + edges[1:]) / 2
        for k, p in enumerate(planes):
            if p is None:
                nearest = min(fitted, key=lambda j: (abs(centres[j] - centres[k]), j))
                planes[k] = planes[nearest]
        is_ground = np.zeros(len(cloud), bool)
        for idx, plane in zip(seg_idx, planes):
            is_ground[idx] = np.abs(plane.signed_distance(xyz[idx])) <= cfg.inlier_threshold
    gi = np.flatnonzero(is_ground)
    ni = np.flatnonzero(~is_ground)
    return GroundPartition(cloud.subset(gi), cloud.subset(ni), gi, ni, tuple(planes), edges)


def euclidean_clusters(xyz: np.ndarray, distance: float) -> np.ndarray:
    """Connected components of the ``distance``-radius neighbour graph."""
    n = len(xyz)
    if n == 0:
        return np.zeros(0, np.int64)
    pairs = cKDTree(xyz).query_pairs(distance, output_type="ndarray")
    g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(g, directed=False)
    return labels


def _fits_envelope(pts: np.ndarray, ground_z: float, cfg: DynamicObjectConfig) -> bool:
    xy = pts[:, :2] - pts[:, :2].mean(axis=0)
    if len(xy) >= 2:
        _, vecs = np.linalg.eigh(np.cov(xy.T, bias=True))
        ext = np.ptp(xy @ vecs, axis=0)
        width, length = sorted(ext)
    else:
        width = length = 0.0
    top = pts[:, 2].max() - ground_z
    bottom = pts[:, 2].min() - ground_z
    return (
        length <= cfg.max_length
        and width <= cfg.max_width
        and cfg.min_height <= top <= cfg.max_height
        and bottom <= cfg.max_bottom_gap
    )


def dynamic_object_mask(
    non_ground: PointCloud,
    cfg: DynamicObjectConfig = DynamicObjectConfig(),
    ground_height=None,
) -> np.ndarray:
    """Boolean mask of non-ground points that belong to vehicle/pedestrian-sized clusters.

    ``ground_height(x, y)`` gives the local ground z; by default the lowest
    point of the cluster is taken as resting on the ground.
    """
    xyz = non_ground.xyz.astype(np.float64)
    remove = np.zeros(len(xyz), bool)
    if len(xyz) == 0:
        return remove
    labels = euclidean_clusters(xyz, cfg.cluster_distance)
    order = np.argsort(labels, kind="stable")
    starts = np.flatnonzero(np.r_[True, np.diff(labels[order]) != 0])
    ends = np.r_[starts[1:], len(order)]
    for s, e in zip(starts, ends):
        if e - s < cfg.min_cluster_size:
            continue
        members = order[s:e]
        pts = xyz[members]
        cx, cy = pts[:, 0].mean(), pts[:, 1].mean()
        gz = float(ground_height(cx, cy)) if ground_height is not None else pts[:, 2].min()
        if _fits_envelope(pts, gz, cfg):
            remove[members] = True
    return remove


def near_objects(points: np.ndarray, object_points: np.ndarray, margin: float) -> np.ndarray:
    """True for points within ``margin`` (horizontal distance) of any object point.

    Low object surfaces such as a car's underside can pass the ground test;
    this catches them along with the contact strip around the object.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    obj = np.asarray(object_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0 or len(obj) == 0 or margin <= 0:
        return np.zeros(len(pts), bool)
    dist, _ = cKDTree(obj[:, :2]).query(pts[:, :2], distance_upper_bound=margin)
    return dist <= margin


def remove_dynamic_objects(
    non_ground: PointCloud,
    cfg: DynamicObjectConfig = DynamicObjectConfig(),
    ground_height=None,
) -> PointCloud:
    return non_ground.subset(~dynamic_object_mask(non_ground, cfg, ground_height))


def partition_ground_height(part: GroundPartition):
    """``(x, y) -> z`` callable using the partition's segment planes."""

    def height(x, y):
        return part.plane_at(float(x)).height_at(x, y)

    return height
