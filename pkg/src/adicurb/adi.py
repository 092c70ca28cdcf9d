"""Altitude Difference Images.

A sparse altitude grid is rasterised from projected LiDAR samples (nearest
depth wins a pixel), then every populated pixel receives the mean of
``|Z(p) - Z(q)| / ||p - q||`` over the populated pixels ``q`` of its
Chebyshev neighbourhood.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numba
import numpy as np

from .kitti_io import atomic_write_bytes
from .projection import MIN_DEPTH, ProjectedArrays

DEFAULT_RADIUS = 2
DEFAULT_CLIP = 0.5


@dataclass(frozen=True, eq=False)
class AltitudeGrid:
    """Per-pixel altitude/depth of the nearest projected point.

    Unpopulated cells hold NaN altitude and +inf depth.
    """

    altitude: np.ndarray  # (H, W) float64
    depth: np.ndarray  # (H, W) float64

    @property
    def height(self) -> int:
        return self.altitude.shape[0]

    @property
    def width(self) -> int:
        return self.altitude.shape[1]

    @property
    def populated(self) -> np.ndarray:
        return np.isfinite(self.depth)

    @classmethod
    def from_dense(cls, altitude: np.ndarray, populated: np.ndarray | None = None) -> "AltitudeGrid":
        """Grid from a dense altitude array (NaN marks empty unless a mask is given)."""
        alt = np.array(altitude, dtype=np.float64)
        pop = np.isfinite(alt) if populated is None else np.asarray(populated, bool) & np.isfinite(alt)
        alt[~pop] = np.nan
        depth = np.where(pop, 1.0, np.inf)
        return cls(alt, depth)


@dataclass(frozen=True, eq=False)
class AltitudeDifferenceImage:
    values: np.ndarray  # (H, W) float64, >= 0
    neighborhood_radius: int

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@numba.njit(cache=True)
def _zbuffer(ui, vi, depth, alt, width, height):
    zb = np.full((height, width), np.inf)
    za = np.full((height, width), np.nan)
    for k in range(ui.shape[0]):
        x = ui[k]
        y = vi[k]
        if depth[k] < zb[y, x]:
            zb[y, x] = depth[k]
            za[y, x] = alt[k]
    return za, zb


@numba.njit(cache=True)
def _project_zbuffer(xyz, M, C, width, height):
    zb = np.full((height, width), np.inf)
    za = np.full((height, width), np.nan)
    for k in range(xyz.shape[0]):
        x = np.float64(xyz[k, 0])
        y = np.float64(xyz[k, 1])
        z = np.float64(xyz[k, 2])
        depth = x * C[2, 0] + y * C[2, 1] + z * C[2, 2] + C[2, 3]
        w = x * M[2, 0] + y * M[2, 1] + z * M[2, 2] + M[2, 3]
        if not (depth > MIN_DEPTH and w > MIN_DEPTH):
            continue
        u = (x * M[0, 0] + y * M[0, 1] + z * M[0, 2] + M[0, 3]) / w
        v = (x * M[1, 0] + y * M[1, 1] + z * M[1, 2] + M[1, 3]) / w
        if not (u >= 0 and u < width and v >= 0 and v < height):
            continue
        ui = min(int(np.floor(u + 0.5)), width - 1)
        vi = min(int(np.floor(v + 0.5)), height - 1)
        if depth < zb[vi, ui]:
            zb[vi, ui] = depth
            za[vi, ui] = z
    return za, zb


def grid_from_points(calib, xyz: np.ndarray) -> AltitudeGrid:
    """Projection and z-buffer in one pass; same result as ``build_altitude_grid(project_arrays(...))``."""
    xyz = np.ascontiguousarray(xyz)
    za, zb = _project_zbuffer(
        xyz, calib.velo_to_image, np.ascontiguousarray(calib.velo_to_rect), int(calib.image_width), int(calib.image_height)
    )
    return AltitudeGrid(za, zb)


def build_altitude_grid(samples, width: int, height: int) -> AltitudeGrid:
    """Rasterise projected samples; ties on depth keep the earliest sample.

    ``samples`` is either :class:`ProjectedArrays` or an iterable of
    ``PixelSample`` / ``(index, PixelSample)`` items.
    """
    if isinstance(samples, ProjectedArrays):
        u, v, d, a = samples.u, samples.v, samples.depth, samples.altitude
    else:
        rows = [s[1] if isinstance(s, tuple) and len(s) == 2 else s for s in samples]
        if rows:
            u, v, d, a = (np.array(c, dtype=np.float64) for c in zip(*[(s.u, s.v, s.depth, s.altitude) for s in rows]))
        else:
            u = v = d = a = np.zeros(0)
    ui = np.clip(np.floor(np.asarray(u) + 0.5), 0, width - 1).astype(np.int64)
    vi = np.clip(np.floor(np.asarray(v) + 0.5), 0, height - 1).astype(np.int64)
    za, zb = _zbuffer(
        ui, vi, np.asarray(d, dtype=np.float64), np.asarray(a, dtype=np.float64), int(width), int(height)
    )
    return AltitudeGrid(za, zb)


@numba.njit(cache=True)
def _fill_columns(alt, depth, max_gap):
    h, w = alt.shape
    out_a = alt.copy()
    out_d = depth.copy()
    for x in range(w):
        last = -1
        for y in range(h):
            if np.isfinite(depth[y, x]):
                if last >= 0 and y - last > 1:
                    for yy in range(last + 1, y):
                        # nearest populated neighbour in the column, ties go to the lower pixel
                        src = last if (yy - last) < (y - yy) else y
                        if abs(yy - src) <= max_gap:
                            out_a[yy, x] = alt[src, x]
                            out_d[yy, x] = depth[src, x]
                last = y
    return out_a, out_d


def fill_vertical(grid: AltitudeGrid, max_gap: int = 8) -> AltitudeGrid:
    """Fill holes between populated pixels of a column from the nearest one."""
    a, d = _fill_columns(grid.altitude, grid.depth, int(max_gap))
    return AltitudeGrid(a, d)


@numba.njit(cache=True)
def _adi_kernel(alt, depth, radius):
    h, w = alt.shape
    out = np.zeros((h, w))
    n_off = (2 * radius + 1) ** 2 - 1
    dys = np.empty(n_off, np.int64)
    dxs = np.empty(n_off, np.int64)
    inv = np.empty(n_off)
    k = 0
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            dys[k] = dy
            dxs[k] = dx
            inv[k] = 1.0 / np.sqrt(dx * dx + dy * dy)
            k += 1
    for y in range(h):
        for x in range(w):
            if not np.isfinite(depth[y, x]):
                continue
            z = alt[y, x]
            s = 0.0
            m = 0
            for k in range(n_off):
                ny = y + dys[k]
                nx = x + dxs[k]
                if ny < 0 or ny >= h or nx < 0 or nx >= w or not np.isfinite(depth[ny, nx]):
                    continue
                s += abs(z - alt[ny, nx]) * inv[k]
                m += 1
            if m > 0:
                out[y, x] = s / m
    return out


def altitude_difference_transform(grid: AltitudeGrid, radius: int = DEFAULT_RADIUS) -> AltitudeDifferenceImage:
    if radius < 1:
        raise ValueError("radius must be >= 1")
    alt = np.ascontiguousarray(grid.altitude, dtype=np.float64)
    depth = np.ascontiguousarray(grid.depth, dtype=np.float64)
    return AltitudeDifferenceImage(_adi_kernel(alt, depth, int(radius)), int(radius))


def normalize_to_8bit(adi: AltitudeDifferenceImage, clip: float = DEFAULT_CLIP) -> np.ndarray:
    if clip <= 0:
        raise ValueError("clip must be > 0")
    scaled = 255.0 * np.minimum(adi.values, clip) / clip
    return np.floor(scaled + 0.5).astype(np.uint8)


def adi_from_projection(
    proj: ProjectedArrays,
    width: int,
    height: int,
    radius: int = DEFAULT_RADIUS,
    fill: bool = False,
    fill_max_gap: int = 8,
) -> AltitudeDifferenceImage:
    grid = build_altitude_grid(proj, width, height)
    if fill:
        grid = fill_vertical(grid, fill_max_gap)
    return altitude_difference_transform(grid, radius)


def adi_from_points(calib, xyz, radius: int = DEFAULT_RADIUS, fill: bool = False, fill_max_gap: int = 8) -> AltitudeDifferenceImage:
    grid = grid_from_points(calib, xyz)
    if fill:
        grid = fill_vertical(grid, fill_max_gap)
    return altitude_difference_transform(grid, radius)


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<II")


def encode_float_image(values: np.ndarray) -> bytes:
    h, w = values.shape
    return _HEADER.pack(w, h) + np.ascontiguousarray(values, dtype="<f4").tobytes()


def decode_float_image(payload: bytes) -> np.ndarray:
    if len(payload) < _HEADER.size:
        raise ValueError("float image shorter than its 8-byte header")
    w, h = _HEADER.unpack_from(payload)
    body = payload[_HEADER.size:]
    if len(body) != 4 * w * h:
        raise ValueError(f"float image body has {len(body)} bytes, expected {4 * w * h}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)


def write_float_image(path: str | os.PathLike, values: np.ndarray) -> None:
    atomic_write_bytes(path, encode_float_image(values))


def read_float_image(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_float_image(fh.read())


def encode_png(img: np.ndarray) -> bytes:
    import io

    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def write_png(path: str | os.PathLike, img: np.ndarray) -> None:
    atomic_write_bytes(path, encode_png(img))


def read_png(path: str | os.PathLike) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"))
