"""Automatic curb annotation: 3D curb detection plus image-space label masks."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import adi as adi_mod
from .beam_classify import RoadSegmentationLine, build_beam_model, find_dominant_extremes, split_left_right
from .config import PipelineConfig
from .curb_features import FeaturePoint, extract_feature_points, organize_layers
from .gpr_filter import iterative_filter
from .ground_seg import dynamic_object_mask, near_objects, partition_ground_height, segment_ground
from .kitti_io import Calibration, PointCloud
from .projection import frustum_mask, project_arrays


@dataclass(frozen=True, eq=False)
class CurbDetection3D:
    left: np.ndarray  # (n, 3) float32, copied bit-exactly from the input cloud
    right: np.ndarray
    left_index: np.ndarray
    right_index: np.ndarray
    frame_id: str = ""
    warnings: tuple = ()
    line: RoadSegmentationLine | None = None
    timings: dict = field(default_factory=dict)

    @property
    def points(self) -> np.ndarray:
        return np.vstack([self.left, self.right])


@dataclass(frozen=True, eq=False)
class LabelMask:
    values: np.ndarray  # (H, W) uint8, 1 = curb
    instances: np.ndarray  # (H, W) uint8, 1 = left curb, 2 = right curb
    dilation_width: int

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def _side_filter(cloud: PointCloud, feats: list[FeaturePoint], heading: float, cfg: PipelineConfig):
    """GPR-filter one side; returns surviving cloud indices and an optional warning."""
    if not feats:
        return np.zeros(0, np.int64), None
    idx = np.array([f.index for f in feats], dtype=np.int64)
    xy = cloud.xyz[idx, :2].astype(np.float64)
    c, s = np.cos(heading), np.sin(heading)
    along = c * xy[:, 0] + s * xy[:, 1]
    lateral = -s * xy[:, 0] + c * xy[:, 1]
    res = iterative_filter(np.column_stack([along, lateral]), cfg.gpr)
    return np.sort(idx[res.inliers]), res.warning


def detect_curbs_3d(cloud: PointCloud, cfg: PipelineConfig = PipelineConfig(), frame_id: str = "") -> CurbDetection3D:
    """Ground split, movable-object removal, ring features, beam split, GPR filter."""
    t = {}
    t0 = time.perf_counter()
    part = segment_ground(cloud, cfg.ground)
    t["ground"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    movable = dynamic_object_mask(part.non_ground, cfg.dynamic, partition_ground_height(part))
    # points under the ground plane (range noise, dips) cannot block a beam
    above = part.height_above(part.non_ground.xyz) > 0
    static = part.non_ground.subset(~movable & above)
    t["dynamic"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    under = near_objects(part.ground.xyz, part.non_ground.xyz[movable], cfg.dynamic.footprint_margin)
    ground_keep = np.flatnonzero(~under)
    layers = organize_layers(part.ground.subset(ground_keep))
    feats = extract_feature_points(layers, cfg.features)
    # feature indices refer to the kept ground points; map them back to the input frame
    feats = [
        FeaturePoint(f.point, int(part.ground_index[ground_keep[f.index]]), f.ring, f.passed)
        for f in feats
        if np.hypot(f.point[0], f.point[1]) <= cfg.annotator.roi_range
    ]
    t["features"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    beams = build_beam_model(static, cfg.beam.n_beams, cfg.beam.max_range)
    line = find_dominant_extremes(beams, cfg.beam.min_separation, cfg.beam.smoothing_window)
    left_f, right_f = split_left_right(feats, line)
    t["classify"] = time.perf_counter() - t0

    warnings = []
    if line.fallback_front:
        warnings.append("fallback_front_direction")
    if line.fallback_rear:
        warnings.append("fallback_rear_direction")
    t0 = time.perf_counter()
    out = {}
    for side, fs in (("left", left_f), ("right", right_f)):
        idx, warn = _side_filter(cloud, fs, line.direction_front, cfg)
        if warn:
            warnings.append(f"{side}: {warn}")
        if len(idx) == 0:
            warnings.append(f"empty_{side}")
        out[side] = idx
    t["gpr"] = time.perf_counter() - t0

    return CurbDetection3D(
        cloud.xyz[out["left"]].copy(),
        cloud.xyz[out["right"]].copy(),
        out["left"],
        out["right"],
        frame_id,
        tuple(warnings),
        line,
        t,
    )


def _disk_offsets(radius: int) -> np.ndarray:
    r = int(radius)
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    keep = dx * dx + dy * dy <= r * r
    return np.column_stack([dy[keep], dx[keep]])


def render_label_mask(det: CurbDetection3D, calib: Calibration, dilation_width: int = 2) -> LabelMask:
    """Project curb points into the image and stamp a disk of ``dilation_width`` px around each."""
    h, w = calib.image_height, calib.image_width
    inst = np.zeros((h, w), np.uint8)
    offs = _disk_offsets(dilation_width)
    for label, pts in ((1, det.left), (2, det.right)):
        if len(pts) == 0:
            continue
        pa = project_arrays(calib, pts)
        ui = np.clip(np.floor(pa.u + 0.5), 0, w - 1).astype(np.int64)
        vi = np.clip(np.floor(pa.v + 0.5), 0, h - 1).astype(np.int64)
        yy = (vi[:, None] + offs[None, :, 0]).ravel()
        xx = (ui[:, None] + offs[None, :, 1]).ravel()
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        inst[yy[ok], xx[ok]] = label
    return LabelMask((inst > 0).astype(np.uint8), inst, int(dilation_width))


def cloud_to_adi(cloud: PointCloud, calib: Calibration, cfg: PipelineConfig = PipelineConfig()) -> adi_mod.AltitudeDifferenceImage:
    """Frustum crop, projection, z-buffered altitude grid and the altitude-difference transform."""
    return adi_mod.adi_from_points(calib, cloud.xyz, cfg.adi.radius, cfg.adi.fill, cfg.adi.fill_max_gap)


def generate_training_pair(cloud: PointCloud, calib: Calibration, cfg: PipelineConfig = PipelineConfig(), frame_id: str = ""):
    """``(adi, label_mask, detection)`` for one frame; ADI and mask share dimensions."""
    det = detect_curbs_3d(cloud, cfg, frame_id)
    cropped = cloud.subset(frustum_mask(calib, cloud.xyz))
    image = cloud_to_adi(cropped, calib, cfg)
    mask = render_label_mask(det, calib, cfg.label.dilation_width)
    return image, mask, det
