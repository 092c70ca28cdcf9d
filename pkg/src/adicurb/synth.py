"""Ray-cast synthetic street scenes with known curb geometry.

The scene is a road plane at ``z = -sensor_height`` between two curb lines
``y = f(x)`` (quadratic per side), raised sidewalks beyond them and optional
boxes (parked cars, building walls). Every laser ray of a spinning multi-ring
sensor is intersected with that surface; the first hit becomes a point.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .kitti_io import Calibration, PointCloud
from .projection import make_calibration

ROAD, SIDEWALK, CURB_LEFT, CURB_RIGHT, OBSTACLE = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class Box:
    """Upright box; ``clearance`` lifts its bottom above the road plane."""

    center_x: float
    center_y: float
    length: float = 4.0
    width: float = 2.0
    height: float = 1.5
    clearance: float = 0.25
    yaw: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    road_width: float = 8.0
    curb_height: float = 0.15
    # per side (quadratic, linear, constant) terms added to +-road_width/2
    curb_profile: tuple = ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    curbs: bool = True
    sensor_height: float = 1.73
    rings: int = 64
    vertical_fov: tuple = (-24.8, 2.0)  # degrees
    azimuth_resolution: float = float(np.deg2rad(0.2))
    max_range: float = 80.0
    obstacles: tuple = ()
    wall_setback: float | None = None  # building faces this far behind each curb
    wall_height: float = 4.0
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        if self.road_width <= 0:
            raise ValueError("road_width must be > 0")
        if self.curb_height <= 0:
            raise ValueError("curb_height must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.rings < 1 or self.azimuth_resolution <= 0:
            raise ValueError("need >= 1 ring and a positive azimuth resolution")
        obs = tuple(o if isinstance(o, Box) else Box(**o) for o in self.obstacles)
        object.__setattr__(self, "obstacles", obs)
        object.__setattr__(
            self, "curb_profile", tuple(tuple(float(c) for c in side) for side in self.curb_profile)
        )
        object.__setattr__(self, "vertical_fov", tuple(float(v) for v in self.vertical_fov))

    def curb_coeffs(self, side: str) -> tuple[float, float, float]:
        """(a, b, c) with lateral offset y = a x^2 + b x + c of the given curb."""
        k = 0 if side == "left" else 1
        a, b, c = self.curb_profile[k]
        sign = 1.0 if side == "left" else -1.0
        return a, b, c + sign * self.road_width / 2

    def curb_y(self, side: str, x):
        a, b, c = self.curb_coeffs(side)
        x = np.asarray(x, dtype=np.float64)
        return a * x * x + b * x + c

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        d = dict(d)
        if "obstacles" in d:
            d["obstacles"] = tuple(Box(**o) if isinstance(o, dict) else o for o in d["obstacles"])
        for key in ("curb_profile", "vertical_fov"):
            if key in d:
                d[key] = tuple(tuple(v) if isinstance(v, list) else v for v in d[key])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class SceneTruth:
    polylines: dict  # side -> (N, 3) base line of the curb face, sensor frame
    labels: np.ndarray  # per point surface label
    azimuth_index: np.ndarray  # per point firing column
    spec: SceneSpec = field(repr=False)


def ring_elevations(spec: SceneSpec) -> np.ndarray:
    lo, hi = spec.vertical_fov
    return np.deg2rad(np.linspace(lo, hi, spec.rings))


def _first_root(A, B, C, lo, hi):
    """Smallest root of A t^2 + B t + C in (lo, hi], else +inf (vectorised)."""
    out = np.full(np.shape(B), np.inf)
    lin = np.abs(A) < 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lin = np.where(lin & (np.abs(B) > 0), -C / np.where(B == 0, 1.0, B), np.inf)
        disc = B * B - 4 * A * C
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
        den = np.where(lin, 1.0, 2 * A)
        r1 = (-B - sq) / den
        r2 = (-B + sq) / den
    for r in (np.where(lin, t_lin, r1), np.where(lin, np.inf, r2)):
        ok = np.isfinite(r) & (r > lo) & (r <= hi)
        out = np.where(ok & (r < out), r, out)
    return out


def _box_entry(box: Box, H: float, d: np.ndarray) -> np.ndarray:
    """Ray/box entry distance (slab test) for rays from the origin."""
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    # rotate ray directions into the box frame
    dx = c * d[:, 0] + s * d[:, 1]
    dy = -s * d[:, 0] + c * d[:, 1]
    dz = d[:, 2]
    ox = -(c * box.center_x + s * box.center_y)
    oy = -(-s * box.center_x + c * box.center_y)
    bounds = [
        (ox, dx, -box.length / 2, box.length / 2),
        (oy, dy, -box.width / 2, box.width / 2),
        (0.0, dz, -H + box.clearance, -H + box.clearance + box.height),
    ]
    t0 = np.zeros(len(d))
    t1 = np.full(len(d), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for o, dd, lo, hi in bounds:
            inv = 1.0 / dd
            a = (lo - o) * inv
            b = (hi - o) * inv
            near = np.where(dd == 0, np.where((o >= lo) & (o <= hi), -np.inf, np.inf), np.minimum(a, b))
            far = np.where(dd == 0, np.where((o >= lo) & (o <= hi), np.inf, -np.inf), np.maximum(a, b))
            t0 = np.maximum(t0, near)
            t1 = np.minimum(t1, far)
    return np.where((t0 <= t1) & (t0 > 0), t0, np.inf)


def _walls(spec: SceneSpec) -> list[Box]:
    if spec.wall_setback is None or not spec.curbs:
        return []
    out = []
    half = spec.max_range
    for side, sign in (("left", 1.0), ("right", -1.0)):
        y0 = float(spec.curb_y(side, 0.0)) + sign * (spec.wall_setback + 0.5)
        out.append(Box(0.0, y0, 2 * half, 1.0, spec.wall_height, 0.0, 0.0))
    return out


def generate_scene(spec: SceneSpec) -> tuple[PointCloud, SceneTruth, Calibration]:
    H, h = spec.sensor_height, spec.curb_height
    el = ring_elevations(spec)
    n_az = int(round(2 * np.pi / spec.azimuth_resolution))
    az = -np.pi + np.arange(n_az) * (2 * np.pi / n_az)
    # firing order: column by column, lowest ring first
    A, E = np.meshgrid(az, el, indexing="ij")
    ring = np.broadcast_to(np.arange(spec.rings), A.shape).ravel()
    col = np.broadcast_to(np.arange(n_az)[:, None], A.shape).ravel()
    A, E = A.ravel(), E.ravel()
    d = np.column_stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)])

    t_hit = np.full(len(d), np.inf)
    label = np.full(len(d), -1, np.int8)
    down = d[:, 2] < 0
    with np.errstate(divide="ignore"):
        t_road = np.where(down, -H / d[:, 2], np.inf)
        t_top = np.where(down, -(H - h) / d[:, 2], np.inf) if spec.curbs else t_road

    if spec.curbs:
        al, bl, cl = spec.curb_coeffs("left")
        ar, br, cr = spec.curb_coeffs("right")

        def inside(t):
            x, y = t * d[:, 0], t * d[:, 1]
            return (y < al * x * x + bl * x + cl) & (y > ar * x * x + br * x + cr)

        on_sidewalk = down & ~inside(np.where(down, t_top, 0.0))
        t_hit[on_sidewalk] = t_top[on_sidewalk]
        label[on_sidewalk] = SIDEWALK
        # rays still over the road when they reach curb height: face or road
        rest = down & ~on_sidewalk
        dx, dy = d[:, 0], d[:, 1]
        # y(t) - f(x(t)) = -a dx^2 t^2 + (dy - b dx) t - c
        tl = _first_root(-al * dx * dx, dy - bl * dx, -cl + 0 * dx, t_top, t_road)
        tr = _first_root(-ar * dx * dx, dy - br * dx, -cr + 0 * dx, t_top, t_road)
        t_face = np.minimum(tl, tr)
        face = rest & np.isfinite(t_face)
        t_hit[face] = t_face[face]
        label[face] = np.where(tl[face] <= tr[face], CURB_LEFT, CURB_RIGHT)
        road = rest & ~face
        t_hit[road] = t_road[road]
        label[road] = ROAD
    else:
        t_hit[down] = t_road[down]
        label[down] = ROAD

    for box in list(spec.obstacles) + _walls(spec):
        tb = _box_entry(box, H, d)
        closer = tb < t_hit
        t_hit[closer] = tb[closer]
        label[closer] = OBSTACLE

    keep = np.isfinite(t_hit) & (t_hit <= spec.max_range)
    pts = d[keep] * t_hit[keep, None]
    lab = label[keep]
    rng = np.random.default_rng(spec.seed)
    if spec.noise_sigma > 0:
        pts[:, 2] += rng.normal(0.0, spec.noise_sigma, len(pts))
    intensity = np.where(lab == ROAD, 0.2, np.where(lab == OBSTACLE, 0.6, 0.35)).astype(np.float32)
    cloud = PointCloud(pts.astype(np.float32), intensity, ring[keep].astype(np.int32), spec.rings)

    polylines = {}
    if spec.curbs:
        xs = np.arange(-spec.max_range, spec.max_range + 1e-9, 0.1)
        for side in ("left", "right"):
            polylines[side] = np.column_stack([xs, spec.curb_y(side, xs), np.full_like(xs, -H)])
    truth = SceneTruth(polylines, lab, col[keep].astype(np.int32), spec)
    return cloud, truth, make_calibration()


def curb_crossings(cloud: PointCloud, truth: SceneTruth) -> list[tuple[str, int, np.ndarray]]:
    """Places where a ring trace crosses a curb: ``(side, ring, xy)`` triples.

    A crossing is a run of curb-face points, or a road/sidewalk transition
    between consecutive points of a ring when no face point was sampled.
    """
    out = []
    xyz = cloud.xyz.astype(np.float64)
    for r in np.unique(cloud.ring_ids):
        idx = np.flatnonzero(cloud.ring_ids == r)
        idx = idx[np.argsort(truth.azimuth_index[idx], kind="stable")]
        lab = truth.labels[idx]
        k = 0
        while k < len(idx):
            if lab[k] in (CURB_LEFT, CURB_RIGHT):
                j = k
                while j + 1 < len(idx) and lab[j + 1] == lab[k]:
                    j += 1
                side = "left" if lab[k] == CURB_LEFT else "right"
                out.append((side, int(r), xyz[idx[k : j + 1], :2].mean(axis=0)))
                k = j + 1
                continue
            if k + 1 < len(idx) and {lab[k], lab[k + 1]} == {ROAD, SIDEWALK}:
                mid = xyz[idx[[k, k + 1]], :2].mean(axis=0)
                side = "left" if mid[1] > 0 else "right"
                out.append((side, int(r), mid))
            k += 1
    return out


def _draw_polyline(grid: np.ndarray, u: np.ndarray, v: np.ndarray, value: int) -> None:
    """Rasterise a pixel-space polyline; non-finite vertices break it into pieces."""
    good = np.isfinite(u) & np.isfinite(v)
    bounds = np.flatnonzero(np.diff(np.r_[False, good, False].astype(np.int8)))
    for a, b in zip(bounds[::2], bounds[1::2]):
        pu, pv = u[a:b], v[a:b]
        if len(pu) == 1:
            uu, vv = pu, pv
        else:
            # densify to <= 0.25 px steps so rounded samples stay 8-connected
            seg = np.hypot(np.diff(pu), np.diff(pv))
            steps = np.maximum(1, np.ceil(seg / 0.25).astype(int))
            uu = np.concatenate([np.linspace(pu[i], pu[i + 1], n, endpoint=False) for i, n in enumerate(steps)] + [pu[-1:]])
            vv = np.concatenate([np.linspace(pv[i], pv[i + 1], n, endpoint=False) for i, n in enumerate(steps)] + [pv[-1:]])
        ui = np.floor(uu + 0.5).astype(np.int64)
        vi = np.floor(vv + 0.5).astype(np.int64)
        ok = (ui >= 0) & (ui < grid.shape[1]) & (vi >= 0) & (vi < grid.shape[0])
        grid[vi[ok], ui[ok]] = value


def ground_truth_bev(polylines: dict, bev, x_range: tuple[float, float] | None = None):
    """Rasterise curb polylines into an instance-labelled BEV grid.

    Left curb is instance 1, right curb instance 2. Consecutive pixels of a
    rasterised line are 8-connected.
    """
    from .postprocess import BevGrid

    grid = np.zeros((bev.height, bev.width), np.uint8)
    for inst, side in ((1, "left"), (2, "right")):
        line = polylines.get(side)
        if line is None or len(line) < 2:
            continue
        line = np.asarray(line, dtype=np.float64)
        if x_range is not None:
            line = line[(line[:, 0] >= x_range[0]) & (line[:, 0] <= x_range[1])]
            if len(line) < 2:
                continue
        u, v = bev.ground_to_pixel(line[:, 0], line[:, 1])
        _draw_polyline(grid, np.asarray(u, float), np.asarray(v, float), inst)
    return BevGrid(grid, bev)


def occluded(spec: SceneSpec, points: np.ndarray) -> np.ndarray:
    """True where the segment from the sensor origin to a point hits an obstacle or wall."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dist = np.linalg.norm(p, axis=1)
    d = p / np.where(dist > 0, dist, 1.0)[:, None]
    out = np.zeros(len(p), bool)
    for box in list(spec.obstacles) + _walls(spec):
        out |= _box_entry(box, spec.sensor_height, d) < dist
    return out


def ground_truth_bev_via_image(
    truth: SceneTruth, calib: Calibration, homography, bev, face_fraction: float = 0.5, drop_occluded: bool = True
):
    """Curb lines as a perfect image-space label would appear after the flat-ground BEV warp.

    Each curb is sampled at ``face_fraction`` of its face height, projected
    into the camera image and mapped to BEV pixels with ``homography``.
    Stretches outside the image are left out, and so are stretches hidden
    behind obstacles unless ``drop_occluded`` is false.
    """
    from .postprocess import BevGrid
    from .projection import project_arrays

    spec = truth.spec
    grid = np.zeros((bev.height, bev.width), np.uint8)
    for inst, side in ((1, "left"), (2, "right")):
        line = truth.polylines.get(side)
        if line is None:
            continue
        pts = np.asarray(line, dtype=np.float64).copy()
        pts[:, 2] += face_fraction * spec.curb_height
        pa = project_arrays(calib, pts)
        uv = np.full((len(pts), 2), np.nan)
        uv[pa.index] = np.column_stack([pa.u, pa.v])
        if drop_occluded:
            uv[occluded(spec, pts)] = np.nan
        # projection already dropped points behind the camera; NaNs pass through
        with np.errstate(invalid="ignore"):
            buv = homography.apply(uv)
        _draw_polyline(grid, buv[:, 0], buv[:, 1], inst)
    return BevGrid(grid, bev)


def scene_suite(n: int = 20, base_seed: int = 0) -> list[SceneSpec]:
    """Seeded mix of straight and gently curved streets with one parked car."""
    specs = []
    for i in range(n):
        rng = np.random.default_rng(base_seed + 1000 + i)
        curved = i % 2 == 1
        width = float(rng.uniform(7.5, 10.0))
        height = float(rng.uniform(0.12, 0.2))
        if curved:
            a = float(rng.uniform(0.0008, 0.0015)) * (1 if rng.random() < 0.5 else -1)
            b = float(rng.uniform(-0.01, 0.01))
            profile = ((a, b, 0.0), (a, b, 0.0))
        else:
            profile = ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
        side = 1.0 if rng.random() < 0.5 else -1.0
        car_x = float(rng.uniform(8.0, 20.0)) * (1 if rng.random() < 0.7 else -1)
        a_, b_, c_ = profile[0 if side > 0 else 1]
        curb_at = side * width / 2 + a_ * car_x**2 + b_ * car_x + c_
        car = Box(car_x, curb_at - side * 1.4, 4.2, 1.8, 1.5, 0.25, float(np.arctan(2 * a_ * car_x + b_)))
        specs.append(
            SceneSpec(
                road_width=width,
                curb_height=height,
                curb_profile=profile,
                obstacles=(car,),
                noise_sigma=0.02,
                seed=base_seed + i,
            )
        )
    return specs


def score_detection(
    cloud: PointCloud,
    truth: SceneTruth,
    indices: dict,
    roi: float = 40.0,
    radius: float = 1.0,
    lateral_tol: float = 0.3,
    same_ring: bool = False,
) -> dict:
    """Per-side lateral RMS and crossing recall of detected curb points.

    ``indices`` maps ``"left"``/``"right"`` to cloud indices. A ground-truth
    ring crossing within ``roi`` metres counts as found when a detected point
    lies within ``radius`` of it and within ``lateral_tol`` of the true curb
    line (and on the same ring if ``same_ring``).
    """
    spec = truth.spec
    xyz = cloud.xyz.astype(np.float64)
    crossings = curb_crossings(cloud, truth)
    out = {}
    for side in ("left", "right"):
        idx = np.asarray(indices.get(side, []), dtype=np.int64)
        pts = xyz[idx]
        rings = cloud.ring_ids[idx]
        err = pts[:, 1] - spec.curb_y(side, pts[:, 0])
        good = np.abs(err) <= lateral_tol
        gts = [(r, xy) for s, r, xy in crossings if s == side and np.hypot(*xy) <= roi]
        found = 0
        for r, xy in gts:
            ok = good & (np.hypot(pts[:, 0] - xy[0], pts[:, 1] - xy[1]) <= radius)
            if same_ring:
                ok &= rings == r
            found += bool(ok.any())
        out[side] = {
            "points": len(idx),
            "rms": float(np.sqrt(np.mean(err**2))) if len(idx) else float("nan"),
            "crossings": len(gts),
            "recall": found / len(gts) if gts else float("nan"),
        }
    return out
