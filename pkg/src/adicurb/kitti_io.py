"""Readers and writers for KITTI velodyne scans and calibration files.

A velodyne scan is a headerless run of little-endian ``float32`` quadruples
``(x, y, z, intensity)``. Calibration files are ``KEY: v1 v2 ...`` lines.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

RECORD_BYTES = 16
MAX_ROW3_OFFSET = 0.05  # meters
_F32LE = np.dtype("<f4")


class KittiFormatError(ValueError):
    """Malformed scan or calibration file."""


class CalibrationError(ValueError):
    """Calibration matrices violate their geometric invariants."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered LiDAR frame.

    ``xyz`` is ``(N, 3)`` float32 in the sensor frame, ``intensity`` is ``(N,)``
    float32 and ``ring_ids`` is ``(N,)`` int32 with values in ``[0, num_rings)``.
    Arrays are made read-only on construction.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    ring_ids: np.ndarray
    num_rings: int
    dropped_nonfinite: int = 0

    def __post_init__(self) -> None:
        xyz = np.asarray(self.xyz, dtype=np.float32).reshape(-1, 3)
        n = len(xyz)
        intensity = np.asarray(self.intensity, dtype=np.float32).reshape(-1)
        rings = np.asarray(self.ring_ids, dtype=np.int32).reshape(-1)
        if len(intensity) != n or len(rings) != n:
            raise ValueError(
                f"length mismatch: xyz={n} intensity={len(intensity)} rings={len(rings)}"
            )
        if n and (rings.min() < 0 or rings.max() >= self.num_rings):
            raise ValueError(f"ring id out of range [0, {self.num_rings})")
        object.__setattr__(self, "xyz", _frozen(xyz))
        object.__setattr__(self, "intensity", _frozen(intensity))
        object.__setattr__(self, "ring_ids", _frozen(rings))

    def __len__(self) -> int:
        return len(self.xyz)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0, np.int32), 0)

    @classmethod
    def from_xyz(cls, xyz, intensity=None, ring_ids=None, num_rings: int | None = None) -> "PointCloud":
        xyz = np.asarray(xyz, dtype=np.float32).reshape(-1, 3)
        if intensity is None:
            intensity = np.zeros(len(xyz), np.float32)
        if ring_ids is None:
            ring_ids = np.zeros(len(xyz), np.int32)
            num_rings = 1 if len(xyz) else 0
        elif num_rings is None:
            num_rings = int(np.max(ring_ids)) + 1 if len(xyz) else 0
        return cls(xyz, intensity, ring_ids, num_rings)

    def subset(self, index) -> "PointCloud":
        """Points selected by a boolean mask or an index array, order preserved."""
        return PointCloud(
            self.xyz[index], self.intensity[index], self.ring_ids[index], self.num_rings
        )


@dataclass(frozen=True, eq=False)
class Calibration:
    projection: np.ndarray  # 3x4 rectified camera matrix
    rect_rotation: np.ndarray  # 4x4
    lidar_to_cam: np.ndarray  # 4x4 rigid
    image_width: int = 1242
    image_height: int = 375
    velo_to_image: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        P = np.asarray(self.projection, dtype=np.float64).reshape(3, 4)
        R = _pad4(np.asarray(self.rect_rotation, dtype=np.float64))
        T = _pad4(np.asarray(self.lidar_to_cam, dtype=np.float64))
        validate_calibration(P, T, tol=1e-3)
        object.__setattr__(self, "projection", _frozen(P))
        object.__setattr__(self, "rect_rotation", _frozen(R))
        object.__setattr__(self, "lidar_to_cam", _frozen(T))
        object.__setattr__(self, "velo_to_image", _frozen(P @ R @ T))

    @property
    def velo_to_rect(self) -> np.ndarray:
        """4x4 transform from the sensor frame to the rectified camera frame."""
        return self.rect_rotation @ self.lidar_to_cam


def _pad4(m: np.ndarray) -> np.ndarray:
    if m.shape == (4, 4):
        return m.copy()
    out = np.eye(4)
    if m.size == 9:
        out[:3, :3] = m.reshape(3, 3)
    elif m.size == 12:
        out[:3, :] = m.reshape(3, 4)
    else:
        raise KittiFormatError(f"cannot pad matrix with {m.size} entries to 4x4")
    return out


def validate_calibration(projection: np.ndarray, lidar_to_cam: np.ndarray, tol: float = 1e-6) -> None:
    R = lidar_to_cam[:3, :3]
    err = np.abs(R @ R.T - np.eye(3)).max()
    det = np.linalg.det(R)
    if err > tol or abs(det - 1.0) > tol:
        raise CalibrationError(
            f"lidar_to_cam rotation not orthonormal (|RR^T - I|={err:.3g}, det={det:.6f})"
        )
    # KITTI P2/P3 carry the camera's few-millimetre z offset in the last entry of row 3
    if not np.allclose(projection[2, :3], [0.0, 0.0, 1.0], atol=tol) or abs(projection[2, 3]) > MAX_ROW3_OFFSET:
        raise CalibrationError(f"projection row 3 must be [0 0 1 0], got {projection[2]}")


# ---------------------------------------------------------------------------
# velodyne scans
# ---------------------------------------------------------------------------


def load_point_cloud(path: str | os.PathLike, num_rings: int = 64) -> PointCloud:
    """Decode a KITTI ``.bin`` scan and reconstruct ring ids.

    Records with a non-finite coordinate are dropped; the count is kept in
    ``dropped_nonfinite``.
    """
    path = Path(path)
    raw = path.read_bytes()
    tail = len(raw) % RECORD_BYTES
    if tail:
        offset = len(raw) - tail
        raise KittiFormatError(
            f"{path}: trailing {tail} byte{'s' if tail > 1 else ''} at byte offset {offset} "
            f"(file length {len(raw)} is not a multiple of {RECORD_BYTES})"
        )
    data = np.frombuffer(raw, dtype=_F32LE).reshape(-1, 4)
    finite = np.isfinite(data[:, :3]).all(axis=1)
    dropped = int((~finite).sum())
    if dropped:
        log.warning("%s: dropped %d points with non-finite coordinates", path, dropped)
        data = data[finite]
    cloud = PointCloud(
        data[:, :3].astype(np.float32),
        data[:, 3].astype(np.float32),
        np.zeros(len(data), np.int32),
        1 if len(data) else 0,
        dropped_nonfinite=dropped,
    )
    if len(cloud) == 0:
        return cloud
    cloud = assign_ring_ids(cloud, num_rings)
    return PointCloud(cloud.xyz, cloud.intensity, cloud.ring_ids, cloud.num_rings, dropped)


def write_point_cloud(path: str | os.PathLike, cloud: PointCloud) -> None:
    rec = np.empty((len(cloud), 4), dtype=_F32LE)
    rec[:, :3] = cloud.xyz
    rec[:, 3] = cloud.intensity
    atomic_write_bytes(path, rec.tobytes())


def write_ring_sidecar(path: str | os.PathLike, cloud: PointCloud) -> None:
    """Per-point ring ids as ``uint8``, for sources that know them (synthetic scans)."""
    atomic_write_bytes(path, np.asarray(cloud.ring_ids, dtype=np.uint8).tobytes())


def apply_ring_sidecar(cloud: PointCloud, path: str | os.PathLike, num_rings: int) -> PointCloud:
    """Replace reconstructed ring ids with stored ones; mismatched sidecars are ignored."""
    rings = np.fromfile(path, dtype=np.uint8)
    if cloud.dropped_nonfinite or len(rings) != len(cloud) or (len(rings) and rings.max() >= num_rings):
        log.warning("%s: ring sidecar does not match the scan, keeping reconstructed rings", path)
        return cloud
    return PointCloud(cloud.xyz, cloud.intensity, rings.astype(np.int32), num_rings)


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def vertical_angles(xyz: np.ndarray) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64)
    return np.arctan2(xyz[:, 2], np.hypot(xyz[:, 0], xyz[:, 1]))


def assign_ring_ids(cloud: PointCloud, num_rings: int) -> PointCloud:
    """Bin vertical angles uniformly between the frame's min and max into rings.

    Ring 0 holds the lowest angle. A frame with fewer than two distinct angles
    is put entirely on ring 0.
    """
    if num_rings < 1:
        raise ValueError("num_rings must be >= 1")
    if len(cloud) == 0:
        return PointCloud.empty()
    ang = vertical_angles(cloud.xyz)
    lo, hi = ang.min(), ang.max()
    if hi <= lo:
        rings = np.zeros(len(ang), np.int32)
    else:
        rings = np.floor((ang - lo) / (hi - lo) * num_rings).astype(np.int64)
        rings = np.clip(rings, 0, num_rings - 1).astype(np.int32)
    return PointCloud(cloud.xyz, cloud.intensity, rings, num_rings, cloud.dropped_nonfinite)


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

# odometry-style calib.txt files name the extrinsic "Tr" and ship rectified P matrices
_ALIASES = {"Tr_velo_to_cam": ("Tr_velo_to_cam", "Tr_velo_cam", "Tr")}


def _parse_calib_lines(path: Path) -> dict[str, tuple[np.ndarray, int]]:
    out: dict[str, tuple[np.ndarray, int]] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if ":" not in line:
            raise KittiFormatError(f"{path}:{lineno}: expected 'KEY: values'")
        key, _, rest = line.partition(":")
        try:
            vals = np.array([float(t) for t in rest.split()], dtype=np.float64)
        except ValueError as e:
            raise KittiFormatError(f"{path}:{lineno}: {e}") from None
        out[key.strip()] = (vals, lineno)
    return out


def load_calibration(
    path: str | os.PathLike,
    camera: str = "P2",
    image_width: int = 1242,
    image_height: int = 375,
) -> Calibration:
    path = Path(path)
    entries = _parse_calib_lines(path)

    def get(key: str, size: int) -> np.ndarray:
        for alias in _ALIASES.get(key, (key,)):
            if alias in entries:
                vals, lineno = entries[alias]
                if vals.size != size:
                    raise KittiFormatError(
                        f"{path}:{lineno}: {alias} has {vals.size} values, expected {size}"
                    )
                return vals
        raise KittiFormatError(f"{path}: {key} not found")

    P = get(camera, 12).reshape(3, 4)
    Tr = get("Tr_velo_to_cam", 12)
    if "R0_rect" in entries or "Tr" not in entries:
        R0 = get("R0_rect", 9)
    else:
        R0 = np.eye(3)
    try:
        return Calibration(P, _pad4(R0), _pad4(Tr), image_width, image_height)
    except CalibrationError as e:
        raise CalibrationError(f"{path}: {e}") from None


def write_calibration(path: str | os.PathLike, calib: Calibration, camera: str = "P2") -> None:
    def fmt(m: np.ndarray) -> str:
        return " ".join(repr(float(v)) for v in np.ravel(m))

    lines = [
        f"{camera}: {fmt(calib.projection)}",
        f"R0_rect: {fmt(calib.rect_rotation[:3, :3])}",
        f"Tr_velo_to_cam: {fmt(calib.lidar_to_cam[:3, :])}",
    ]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def crop_to_frustum(cloud: PointCloud, calib: Calibration) -> PointCloud:
    """Keep points that project inside the image with positive camera depth."""
    from .projection import frustum_mask

    return cloud.subset(frustum_mask(calib, cloud.xyz))


def frame_paths(dataset_dir: str | os.PathLike) -> list[Path]:
    """Sorted ``velodyne/*.bin`` files of a KITTI-style sequence directory."""
    root = Path(dataset_dir)
    sub = root / "velodyne"
    base = sub if sub.is_dir() else root
    return sorted(base.glob("*.bin"))


def find_calibration(dataset_dir: str | os.PathLike) -> Path | None:
    root = Path(dataset_dir)
    for name in ("calib.txt", "calib/calib.txt"):
        if (root / name).is_file():
            return root / name
    return None
