"""Perspective-view curb mask to bird's-eye-view curves.

The mask is inverse-warped into a metric BEV raster through a ground-plane
homography. Each curb instance then contributes at most one candidate per
BEV row (the median column of its pixels in that row) and a quadratic
``u(v) = a v^2 + b v + c`` is fitted to the candidates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numba
import numpy as np
from scipy import ndimage

from .kitti_io import Calibration

log = logging.getLogger(__name__)


class HomographyError(ValueError):
    pass


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class BevSpec:
    """Metric BEV raster: ``width`` columns, ``height`` rows, meters per pixel.

    Row ``height`` sits at sensor ``x = x_near``; the centre column is ``y = 0``.
    """

    width: int = 400
    height: int = 800
    resolution: float = 0.05
    x_near: float = 0.0

    def ground_to_pixel(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return self.width / 2 - y / self.resolution, self.height - (x - self.x_near) / self.resolution

    def pixel_to_ground(self, u, v):
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return self.x_near + (self.height - v) * self.resolution, (self.width / 2 - u) * self.resolution

    @property
    def pixel_from_ground_matrix(self) -> np.ndarray:
        r = self.resolution
        return np.array(
            [[0.0, -1.0 / r, self.width / 2], [-1.0 / r, 0.0, self.height + self.x_near / r], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True, eq=False)
class BevGrid:
    values: np.ndarray  # (height, width) uint8, 0 = background, else instance id
    spec: BevSpec = field(default_factory=BevSpec)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def mask(self) -> np.ndarray:
        return self.values > 0


@dataclass(frozen=True, eq=False)
class Homography:
    """PV -> BEV mapping, normalised so the bottom-right entry is 1."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        if abs(m[2, 2]) < 1e-15:
            raise HomographyError("homography with zero bottom-right entry cannot be normalised")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise HomographyError("singular homography")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def apply(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        q = pts @ self.matrix[:, :2].T + self.matrix[:, 2]
        return q[:, :2] / q[:, 2:3]

    def compose(self, other: "Homography") -> "Homography":
        """``other`` applied after ``self``."""
        return Homography(other.matrix @ self.matrix)


@dataclass(frozen=True)
class QuadraticCurve:
    a: float
    b: float
    c: float
    v_min: int = 0
    v_max: int = 0
    instance: int = 1
    linear_fallback: bool = False

    def __call__(self, v):
        v = np.asarray(v, dtype=np.float64)
        return self.a * v * v + self.b * v + self.c

    def to_dict(self) -> dict:
        return {
            "instance": self.instance,
            "a": self.a,
            "b": self.b,
            "c": self.c,
            "v_min": self.v_min,
            "v_max": self.v_max,
        }


@dataclass(frozen=True)
class PostprocessConfig:
    bev_width: int = 400
    bev_height: int = 800
    resolution: float = 0.05
    x_near: float = 0.0
    ground_height: float = -1.73
    row_gap: int = 200
    min_candidates: int = 3

    @property
    def bev(self) -> BevSpec:
        return BevSpec(self.bev_width, self.bev_height, self.resolution, self.x_near)


@dataclass(frozen=True, eq=False)
class BevCurbResult:
    bev: BevGrid
    candidates: CandidateTable  # iterates as (instance, v, u)
    curves: list
    final: BevGrid
    warnings: tuple = ()


# ---------------------------------------------------------------------------
# homographies
# ---------------------------------------------------------------------------


def _collinear(p, q, r, tol: float = 1e-9) -> bool:
    area = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    scale = max(np.ptp([p[0], q[0], r[0]]), np.ptp([p[1], q[1], r[1]]), 1.0)
    return abs(area) <= tol * scale * scale


def ipm_from_correspondences(src, dst) -> Homography:
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(4, 2)
    for pts in (src, dst):
        if any(_collinear(*pts[list(c)]) for c in combinations(range(4), 3)):
            raise HomographyError("collinear correspondences")
    A = np.zeros((8, 8))
    rhs = np.zeros(8)
    for k, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        A[2 * k] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        A[2 * k + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        rhs[2 * k] = u
        rhs[2 * k + 1] = v
    h = np.linalg.solve(A, rhs)
    return Homography(np.append(h, 1.0).reshape(3, 3))


def ground_to_image_matrix(calib: Calibration, ground_height: float) -> np.ndarray:
    """3x3 map from sensor-frame ground coordinates (x, y, 1) on z = ground_height to the image."""
    M = calib.velo_to_image
    return np.column_stack([M[:, 0], M[:, 1], M[:, 2] * ground_height + M[:, 3]])


def ipm_from_calibration(calib: Calibration, bev: BevSpec, ground_height: float = -1.73) -> Homography:
    G = ground_to_image_matrix(calib, ground_height)
    bev_to_ground = np.linalg.inv(bev.pixel_from_ground_matrix)
    img_from_bev = G @ bev_to_ground
    if np.linalg.cond(G) > 1e12:
        raise HomographyError("camera centre lies on the ground plane; no ground homography exists")
    return Homography(np.linalg.inv(img_from_bev))


# ---------------------------------------------------------------------------
# warping
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _warp_nearest(src, hinv, sign, out_h, out_w):
    sh, sw = src.shape
    out = np.zeros((out_h, out_w), src.dtype)
    for v in range(out_h):
        for u in range(out_w):
            w = hinv[2, 0] * u + hinv[2, 1] * v + hinv[2, 2]
            if w * sign <= 0:
                continue
            x = (hinv[0, 0] * u + hinv[0, 1] * v + hinv[0, 2]) / w
            y = (hinv[1, 0] * u + hinv[1, 1] * v + hinv[1, 2]) / w
            xi = np.floor(x + 0.5)
            yi = np.floor(y + 0.5)
            if xi < 0 or yi < 0 or xi >= sw or yi >= sh:
                continue
            out[v, u] = src[int(yi), int(xi)]
    return out


def warp_to_bev(mask, h: Homography, bev: BevSpec) -> BevGrid:
    """Nearest-neighbour inverse warp; samples that fall outside the source are background.

    ``mask`` may be a 2D array or anything with a ``values`` array (label
    masks carry instance ids through the warp unchanged).
    """
    src = getattr(mask, "instances", None)
    if src is None:
        src = getattr(mask, "values", mask)
    src = np.ascontiguousarray(src, dtype=np.uint8)
    hinv = np.linalg.inv(h.matrix)
    # sign of the homogeneous coordinate for source pixels that see the plane in front
    ref = np.array([src.shape[1] / 2.0, src.shape[0] - 0.5, 1.0])
    sign = 1.0 if (h.matrix @ ref)[2] >= 0 else -1.0
    out = _warp_nearest(src, hinv, sign, int(bev.height), int(bev.width))
    return BevGrid(out, bev)


# ---------------------------------------------------------------------------
# candidates and curves
# ---------------------------------------------------------------------------

_EIGHT = np.ones((3, 3), dtype=bool)


def _instances_from_components(mask: np.ndarray, row_gap: int) -> np.ndarray:
    """Group 8-connected components into curb instances.

    Components on the same side of the centre column whose row extents are
    no more than ``row_gap`` rows apart share an instance.
    """
    comp, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return comp
    rows, cols = np.nonzero(comp)
    lab = comp[rows, cols]
    order = np.argsort(lab, kind="stable")
    bounds = np.searchsorted(lab[order], np.arange(1, n + 2))
    info = []
    for k in range(n):
        sl = order[bounds[k] : bounds[k + 1]]
        side = 0 if np.median(cols[sl]) < mask.shape[1] / 2 else 1
        info.append((side, rows[sl].min(), rows[sl].max(), k + 1))
    remap = np.zeros(n + 1, np.int32)
    next_id = 1
    for side in (0, 1):
        group = sorted((r0, r1, k) for s, r0, r1, k in info if s == side)
        cur_end = None
        for r0, r1, k in group:
            if cur_end is None or r0 - cur_end > row_gap:
                inst = next_id
                next_id += 1
                cur_end = r1
            else:
                cur_end = max(cur_end, r1)
            remap[k] = inst
    return remap[comp]


@dataclass(frozen=True, eq=False)
class CandidateTable:
    """Candidates as parallel arrays sorted by (instance, row); iterates as ``(instance, v, u)``."""

    instance: np.ndarray
    v: np.ndarray
    u: np.ndarray

    def __len__(self) -> int:
        return len(self.v)

    def __iter__(self):
        return iter(self.to_list())

    def to_list(self) -> list[tuple[int, int, float]]:
        return list(zip(self.instance.tolist(), self.v.tolist(), self.u.tolist()))


def candidate_table(bev: BevGrid, row_gap: int = 200, use_instances: bool | None = None) -> CandidateTable:
    vals = bev.values
    if use_instances is None:
        use_instances = vals.max(initial=0) > 1
    labels = vals.astype(np.int32) if use_instances else _instances_from_components(vals > 0, row_gap)
    rows, cols = np.nonzero(labels)
    if len(rows) == 0:
        return CandidateTable(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
    inst = labels[rows, cols]
    # np.nonzero is row-major, so columns within a (instance, row) group come out sorted
    key = inst.astype(np.int64) * (vals.shape[0] + 1) + rows
    order = np.argsort(key, kind="stable")
    key, cols_s = key[order], cols[order].astype(np.float64)
    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    ends = np.r_[starts[1:], len(key)]
    lo = cols_s[starts + (ends - starts - 1) // 2]
    hi = cols_s[starts + (ends - starts) // 2]
    k0 = key[starts]
    return CandidateTable(k0 // (vals.shape[0] + 1), k0 % (vals.shape[0] + 1), (lo + hi) / 2)


def select_candidates(bev: BevGrid, row_gap: int = 200, use_instances: bool | None = None) -> list[tuple[int, int, float]]:
    """One ``(instance, row, median column)`` candidate per instance and occupied row.

    When the grid already carries instance ids (values other than 0/1) they
    are used directly; a binary grid is split into instances by
    connected components.
    """
    return candidate_table(bev, row_gap, use_instances).to_list()


def fit_quadratic(candidates, instance: int = 1) -> QuadraticCurve:
    """Least-squares ``u = a v^2 + b v + c`` on centred, scaled rows."""
    cand = np.asarray(candidates, dtype=np.float64).reshape(-1, 2)
    v, u = cand[:, 0], cand[:, 1]
    if len(np.unique(v)) < 3:
        raise FitError("underdetermined: need candidates on at least 3 distinct rows")
    mean = v.mean()
    scale = np.abs(v - mean).max()
    t = (v - mean) / scale
    X = np.column_stack([t * t, t, np.ones_like(t)])
    N = X.T @ X
    rhs = X.T @ u
    linear = np.linalg.cond(N) > 1e10
    if linear:
        log.warning("near-singular quadratic fit over %d candidates; falling back to a line", len(v))
        Nl = N[1:, 1:]
        beta, gamma = np.linalg.solve(Nl, rhs[1:])
        alpha = 0.0
    else:
        alpha, beta, gamma = np.linalg.solve(N, rhs)
    # u = alpha t^2 + beta t + gamma with t = (v - mean) / scale
    a = alpha / scale**2
    b = beta / scale - 2 * alpha * mean / scale**2
    c = alpha * mean**2 / scale**2 - beta * mean / scale + gamma
    return QuadraticCurve(float(a), float(b), float(c), int(v.min()), int(v.max()), instance, linear)


def rasterize_curves(curves, bev: BevSpec, row_ranges=None) -> BevGrid:
    out = np.zeros((bev.height, bev.width), np.uint8)
    for k, curve in enumerate(curves):
        lo, hi = row_ranges[k] if row_ranges is not None else (curve.v_min, curve.v_max)
        v = np.arange(max(int(lo), 0), min(int(hi), bev.height - 1) + 1)
        u = np.floor(curve(v) + 0.5)
        ok = (u >= 0) & (u < bev.width)
        out[v[ok], u[ok].astype(np.int64)] = min(int(curve.instance), 255)
    return BevGrid(out, bev)


def _split_at_row_gaps(v: np.ndarray, row_gap: int) -> list[slice]:
    """Slices of a sorted row array, cut wherever consecutive rows are more than ``row_gap`` apart."""
    cuts = np.flatnonzero(np.diff(v) > row_gap) + 1
    bounds = np.r_[0, cuts, len(v)]
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def curves_from_bev(bev: BevGrid, cfg: PostprocessConfig = PostprocessConfig(), use_instances=None):
    cands = candidate_table(bev, cfg.row_gap, use_instances)
    curves, warnings = [], []
    ids, first = np.unique(cands.instance, return_index=True)
    ends = np.r_[first[1:], len(cands)]
    for inst, a, b in zip(ids.tolist(), first, ends):
        v, u = cands.v[a:b], cands.u[a:b]
        for piece in _split_at_row_gaps(v, cfg.row_gap):
            n = piece.stop - piece.start
            if n < cfg.min_candidates or n < 3:
                warnings.append(f"instance {inst}: too few candidates ({n})")
                continue
            curve = fit_quadratic(np.column_stack([v[piece], u[piece]]), inst)
            if curve.linear_fallback:
                warnings.append(f"instance {inst}: linear fallback")
            curves.append(curve)
    return cands, curves, warnings


def postprocess_mask(mask, h: Homography, cfg: PostprocessConfig = PostprocessConfig()) -> BevCurbResult:
    """PV mask -> BEV mask -> candidates -> quadratic curves -> final raster."""
    bev = warp_to_bev(mask, h, cfg.bev)
    cands, curves, warnings = curves_from_bev(bev, cfg)
    final = rasterize_curves(curves, cfg.bev)
    return BevCurbResult(bev, cands, curves, final, tuple(warnings))
