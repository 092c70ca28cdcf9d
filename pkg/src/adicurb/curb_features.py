"""Per-ring curb candidate features.

Ground points are grouped into scan layers (one per laser ring, azimuth
ordered). A point is a curb candidate when its neighbourhood shows a height
step inside a band, a non-smooth local shape, and a horizontal spacing to its
successor larger than the flat-ground spacing expected for that ring.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter1d, minimum_filter1d

from .kitti_io import PointCloud

HEIGHT, SMOOTHNESS, DISTANCE = "height", "smoothness", "distance"


class HorizontalRingError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureThresholds:
    h1: float = 0.1
    h2: float = 0.3
    h3: float = 0.035
    t_s: float = 1e-4
    neighbor_half_window: int = 10
    sensor_height: float = 1.73
    angular_resolution: float = float(np.deg2rad(0.2))
    distance_multiplier: float = 0.35
    # rings are cut where consecutive returns are more than this many firing
    # steps apart (occlusion shadows); 0 keeps every ring whole
    max_azimuth_gap: int = 5
    mode: str = "all"  # "all" or "vote" (at least two of three)

    def __post_init__(self) -> None:
        if not 0 < self.h1 < self.h2:
            raise ValueError("need 0 < h1 < h2")
        if self.h3 <= 0 or self.t_s <= 0:
            raise ValueError("h3 and t_s must be positive")
        if self.neighbor_half_window < 1:
            raise ValueError("neighbor_half_window must be >= 1")
        if self.max_azimuth_gap < 0:
            raise ValueError("max_azimuth_gap must be >= 0")
        if self.mode not in ("all", "vote"):
            raise ValueError("mode must be 'all' or 'vote'")


@dataclass(frozen=True, eq=False)
class ScanLayer:
    ring: int
    index: np.ndarray  # indices into the source cloud, azimuth order
    xyz: np.ndarray  # (n, 3) float64
    vertical_angle: float

    def __len__(self) -> int:
        return len(self.index)


@dataclass(frozen=True)
class FeaturePoint:
    point: tuple[float, float, float]
    index: int  # index into the cloud the layers were built from
    ring: int
    passed: frozenset


def organize_layers(ground: PointCloud) -> list[ScanLayer]:
    """One azimuth-sorted layer per non-empty ring (ties broken by input order)."""
    xyz = ground.xyz.astype(np.float64)
    layers = []
    for r in np.unique(ground.ring_ids):
        idx = np.flatnonzero(ground.ring_ids == r)
        az = np.arctan2(xyz[idx, 1], xyz[idx, 0])
        idx = idx[np.argsort(az, kind="stable")]
        p = xyz[idx]
        theta = float(np.median(np.arctan2(p[:, 2], np.hypot(p[:, 0], p[:, 1]))))
        layers.append(ScanLayer(int(r), idx, p, theta))
    return layers


def split_runs(layer: ScanLayer, max_gap: float) -> list[ScanLayer]:
    """Cut a layer wherever the azimuth step between neighbours exceeds ``max_gap`` radians."""
    if max_gap <= 0 or len(layer) < 2:
        return [layer]
    az = np.arctan2(layer.xyz[:, 1], layer.xyz[:, 0])
    cuts = np.flatnonzero(np.diff(az) > max_gap) + 1
    if len(cuts) == 0:
        return [layer]
    bounds = np.r_[0, cuts, len(layer)]
    return [
        ScanLayer(layer.ring, layer.index[a:b], layer.xyz[a:b], layer.vertical_angle)
        for a, b in zip(bounds[:-1], bounds[1:])
    ]


def _window(n: int, i: int, w: int) -> slice:
    return slice(max(0, i - w), min(n, i + w + 1))


def height_difference_pass(layer: ScanLayer, i: int, th: FeatureThresholds) -> bool:
    z = layer.xyz[_window(len(layer), i, th.neighbor_half_window), 2]
    if len(z) < 2:
        return False
    spread = z.max() - z.min()
    std = np.sqrt(np.mean((z - z.mean()) ** 2))
    return bool(th.h1 <= spread <= th.h2 and std >= th.h3)


def smoothness_pass(layer: ScanLayer, i: int, th: FeatureThresholds) -> tuple[float, bool]:
    S = layer.xyz[_window(len(layer), i, th.neighbor_half_window)]
    p = layer.xyz[i]
    norm = np.linalg.norm(p)
    if len(S) < 3 or norm < 1e-9:
        return float("nan"), False
    s = float(np.linalg.norm((p - S).sum(axis=0)) / (len(S) * norm))
    return s, s >= th.t_s


def expected_point_spacing(layer: ScanLayer, th: FeatureThresholds) -> float:
    theta = layer.vertical_angle
    if abs(theta) < 1e-6:
        raise HorizontalRingError("horizontal ring: spacing model undefined at zero elevation")
    return th.sensor_height * abs(np.cos(theta) / np.sin(theta)) * np.pi * th.angular_resolution


def horizontal_distance_pass(layer: ScanLayer, i: int, th: FeatureThresholds, k: float | None = None) -> bool:
    if i + 1 >= len(layer):
        return False
    k = th.distance_multiplier if k is None else k
    try:
        delta = expected_point_spacing(layer, th)
    except HorizontalRingError:
        return False
    gap = np.hypot(*(layer.xyz[i + 1, :2] - layer.xyz[i, :2]))
    return bool(gap > k * delta)


def layer_feature_flags(layer: ScanLayer, th: FeatureThresholds) -> dict[str, np.ndarray]:
    """Vectorised height / smoothness / distance flags for every point of a layer."""
    n = len(layer)
    w = th.neighbor_half_window
    out = {HEIGHT: np.zeros(n, bool), SMOOTHNESS: np.zeros(n, bool), DISTANCE: np.zeros(n, bool)}
    if n == 0:
        return out
    p = layer.xyz
    i = np.arange(n)
    lo = np.maximum(i - w, 0)
    hi = np.minimum(i + w, n - 1)
    cnt = hi - lo + 1
    csum = np.vstack([np.zeros((1, 3)), np.cumsum(p, axis=0)])
    wsum = csum[hi + 1] - csum[lo]
    z = p[:, 2]
    zmax = maximum_filter1d(z, 2 * w + 1, mode="nearest")
    zmin = minimum_filter1d(z, 2 * w + 1, mode="nearest")
    spread = zmax - zmin
    # two-pass variance over each clipped window
    mu = wsum[:, 2] / cnt
    c2 = np.r_[0.0, np.cumsum((z - mu.mean()) ** 2)]
    c1 = np.r_[0.0, np.cumsum(z - mu.mean())]
    s2 = c2[hi + 1] - c2[lo]
    s1 = c1[hi + 1] - c1[lo]
    var = np.maximum(s2 / cnt - (s1 / cnt) ** 2, 0.0)
    out[HEIGHT] = (cnt >= 2) & (spread >= th.h1) & (spread <= th.h2) & (np.sqrt(var) >= th.h3)

    norm = np.linalg.norm(p, axis=1)
    vec = cnt[:, None] * p - wsum
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.linalg.norm(vec, axis=1) / (cnt * norm)
    out[SMOOTHNESS] = (cnt >= 3) & (norm >= 1e-9) & (s >= th.t_s)

    if abs(layer.vertical_angle) >= 1e-6 and n > 1:
        delta = expected_point_spacing(layer, th)
        gap = np.hypot(np.diff(p[:, 0]), np.diff(p[:, 1]))
        out[DISTANCE][:-1] = gap > th.distance_multiplier * delta
    return out


def extract_feature_points(layers: list[ScanLayer], th: FeatureThresholds = FeatureThresholds()) -> list[FeaturePoint]:
    feats = []
    max_gap = th.max_azimuth_gap * th.angular_resolution
    runs = [run for layer in layers for run in split_runs(layer, max_gap)]
    for layer in runs:
        flags = layer_feature_flags(layer, th)
        votes = flags[HEIGHT].astype(int) + flags[SMOOTHNESS] + flags[DISTANCE]
        keep = votes == 3 if th.mode == "all" else votes >= 2
        for j in np.flatnonzero(keep):
            passed = frozenset(name for name, f in flags.items() if f[j])
            feats.append(FeaturePoint(tuple(layer.xyz[j]), int(layer.index[j]), layer.ring, passed))
    return feats


def write_feature_csv(path: str | os.PathLike, feats: list[FeaturePoint]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["ring", "x", "y", "z", "height", "smoothness", "distance"])
        for f in feats:
            wr.writerow([f.ring, *(f"{c:.6f}" for c in f.point), *(int(k in f.passed) for k in (HEIGHT, SMOOTHNESS, DISTANCE))])
