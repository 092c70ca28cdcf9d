"""``adicurb`` command line: ADI generation, annotation, post-processing, evaluation, benchmarks, synthetic data.

Exit codes: 0 success, 1 partial (frames skipped without ``--strict``),
2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import adi as adi_mod
from .config import PipelineConfig, load_config, parse_override
from .kitti_io import (
    Calibration,
    KittiFormatError,
    apply_ring_sidecar,
    atomic_write_bytes,
    find_calibration,
    frame_paths,
    load_calibration,
    load_point_cloud,
    write_calibration,
    write_point_cloud,
    write_ring_sidecar,
)

log = logging.getLogger("adicurb")

OK, PARTIAL, ERROR = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or unreadable inputs; maps to exit code 2."""


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def write_json(path: str | os.PathLike, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def percentiles(samples) -> dict:
    a = np.asarray(samples, dtype=np.float64) * 1e3
    if a.size == 0:
        return {"n": 0}
    return {
        "n": int(a.size),
        "median_ms": float(np.median(a)),
        "p90_ms": float(np.percentile(a, 90)),
        "p95_ms": float(np.percentile(a, 95)),
        "max_ms": float(a.max()),
        "mean_ms": float(a.mean()),
    }


def write_run_json(out: Path, command: str, cfg: PipelineConfig, timings: dict, **extra) -> None:
    write_json(
        out / "run.json",
        {
            "tool": "adicurb",
            "version": __version__,
            "command": command,
            "config_hash": cfg.hash,
            "config": cfg.to_dict(),
            "timings": timings,
            **extra,
        },
    )


def resolve_config(args) -> PipelineConfig:
    try:
        cfg = load_config(args.config)
        overrides = dict(parse_override(t) for t in args.set or [])
        return cfg.with_overrides(overrides) if overrides else cfg
    except (OSError, ValueError, TypeError) as e:
        raise UsageError(f"config: {e}") from None


def read_calibration(path, cfg: PipelineConfig) -> Calibration:
    s = cfg.sensor
    try:
        return load_calibration(path, s.camera, s.image_width, s.image_height)
    except (OSError, ValueError) as e:
        raise UsageError(f"calibration: {e}") from None


def load_frame(path: Path, cfg: PipelineConfig):
    """Load a scan; a ``rings/<stem>.bin`` sidecar next to ``velodyne/`` supplies exact ring ids."""
    cloud = load_point_cloud(path, cfg.sensor.num_rings)
    sidecar = path.parent.parent / "rings" / path.name
    if path.parent.name == "velodyne" and sidecar.is_file() and len(cloud):
        cloud = apply_ring_sidecar(cloud, sidecar, cfg.sensor.num_rings)
    return cloud


def collect_frames(inputs: list[str]) -> list[Path]:
    frames = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            frames.extend(frame_paths(p))
        elif p.is_file():
            frames.append(p)
        else:
            raise UsageError(f"{p}: no such file or directory")
    return frames


def collect_pngs(root: Path, preferred: str) -> dict[str, Path]:
    """``stem -> path`` for the PNGs of ``root/preferred`` if present, else of ``root``."""
    if not root.is_dir():
        raise UsageError(f"{root}: not a directory")
    base = root / preferred if (root / preferred).is_dir() else root
    return {p.stem: p for p in sorted(base.glob("*.png"))}


def read_mask_png(path: Path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            return np.asarray(im.convert("L"))
    except (OSError, UnidentifiedImageError, SyntaxError) as e:
        raise KittiFormatError(f"{path}: malformed PNG ({e})") from None


def stage_summary(records: list[dict]) -> dict:
    stages: dict[str, list] = {}
    for r in records:
        for k, v in r.get("timings", {}).items():
            stages.setdefault(k, []).append(v)
    return {k: percentiles(v) for k, v in sorted(stages.items())}


def run_frames(fn, jobs: int, items: list) -> list[dict]:
    if jobs <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*items)))


def default_jobs() -> int:
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# adi
# ---------------------------------------------------------------------------


def _adi_frame(path: Path, calib: Calibration, cfg: PipelineConfig, out: Path) -> dict:
    from .annotator import cloud_to_adi

    rec = {"frame": path.stem, "ok": False, "timings": {}}
    try:
        t0 = time.perf_counter()
        cloud = load_frame(path, cfg)
        t1 = time.perf_counter()
        image = cloud_to_adi(cloud, calib, cfg)
        t2 = time.perf_counter()
        adi_mod.write_png(out / "adi" / f"{path.stem}.png", adi_mod.normalize_to_8bit(image, cfg.adi.clip))
        adi_mod.write_float_image(out / "adi_f32" / f"{path.stem}.bin", image.values)
        rec["timings"] = {"load": t1 - t0, "adi": t2 - t1, "write": time.perf_counter() - t2}
        rec["ok"] = True
        if cloud.dropped_nonfinite:
            rec["warnings"] = [f"dropped {cloud.dropped_nonfinite} non-finite points"]
    except (OSError, ValueError) as e:
        rec["error"] = str(e)
    return rec


def cmd_adi(args) -> int:
    cfg = resolve_config(args)
    frames = collect_frames(args.inputs)
    calib_path = args.calib
    if calib_path is None:
        for item in args.inputs:
            root = Path(item) if Path(item).is_dir() else Path(item).parent.parent
            calib_path = find_calibration(root)
            if calib_path:
                break
    if calib_path is None:
        raise UsageError("no calibration: pass --calib or put calib.txt in the dataset directory")
    calib = read_calibration(calib_path, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    records = run_frames(_adi_frame, args.jobs, [(p, calib, cfg, out) for p in frames])
    failed = [r for r in records if not r["ok"]]
    for r in failed:
        log.error("frame %s: %s", r["frame"], r["error"])
    summary = {
        "frames": len(frames),
        "written": len(frames) - len(failed),
        "failed": {r["frame"]: r["error"] for r in failed},
        "stages": stage_summary(records),
    }
    if not frames:
        summary["note"] = "no input frames"
    write_run_json(out, "adi", cfg, {"total_s": time.perf_counter() - t0, **summary["stages"]}, summary=summary)
    print(f"adi: {summary['written']}/{len(frames)} frames written to {out}")
    return ERROR if failed else OK


# ---------------------------------------------------------------------------
# annotate
# ---------------------------------------------------------------------------


def _annotate_frame(path: Path, calib: Calibration, cfg: PipelineConfig, out: Path) -> dict:
    from .annotator import generate_training_pair

    rec = {"frame": path.stem, "ok": False, "timings": {}}
    try:
        t0 = time.perf_counter()
        cloud = load_frame(path, cfg)
        t1 = time.perf_counter()
        image, mask, det = generate_training_pair(cloud, calib, cfg, path.stem)
        t2 = time.perf_counter()
        adi_mod.write_png(out / "adi" / f"{path.stem}.png", adi_mod.normalize_to_8bit(image, cfg.adi.clip))
        adi_mod.write_float_image(out / "adi_f32" / f"{path.stem}.bin", image.values)
        adi_mod.write_png(out / "label" / f"{path.stem}.png", mask.instances)
        timings = {"load": t1 - t0, **det.timings, "pair_total": t2 - t1, "write": time.perf_counter() - t2}
        warnings = list(det.warnings)
        if cloud.dropped_nonfinite:
            warnings.append(f"dropped {cloud.dropped_nonfinite} non-finite points")
        write_json(
            out / "meta" / f"{path.stem}.json",
            {
                "frame": path.stem,
                "config_hash": cfg.hash,
                "warnings": warnings,
                "timings": timings,
                "points": len(cloud),
                "curb_points": {"left": len(det.left), "right": len(det.right)},
                "label_pixels": int(mask.values.sum()),
            },
        )
        rec.update(ok=True, timings=timings, warnings=warnings)
    except (OSError, ValueError) as e:
        rec["error"] = str(e)
    return rec


def cmd_annotate(args) -> int:
    cfg = resolve_config(args)
    root = Path(args.dataset)
    if not root.is_dir():
        raise UsageError(f"{root}: not a directory")
    calib_path = args.calib or find_calibration(root)
    if calib_path is None:
        raise UsageError(f"{root}: no calib.txt found (pass --calib)")
    calib = read_calibration(calib_path, cfg)
    frames = frame_paths(root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    records = run_frames(_annotate_frame, args.jobs, [(p, calib, cfg, out) for p in frames])
    skipped = {r["frame"]: r["error"] for r in records if not r["ok"]}
    for fid, err in skipped.items():
        log.warning("skipped frame %s: %s", fid, err)
    stages = stage_summary(records)
    summary = {
        "frames": len(frames),
        "pairs": len(frames) - len(skipped),
        "skipped": skipped,
        "config_hash": cfg.hash,
        "stages": stages,
        "frames_with_warnings": sorted(r["frame"] for r in records if r.get("warnings")),
    }
    write_json(out / "summary.json", summary)
    write_run_json(out, "annotate", cfg, {"total_s": time.perf_counter() - t0, **stages}, frames=len(frames))
    print(f"annotate: {summary['pairs']}/{len(frames)} pairs written to {out}, {len(skipped)} skipped")
    if skipped:
        return ERROR if args.strict else PARTIAL
    return OK


# ---------------------------------------------------------------------------
# postprocess
# ---------------------------------------------------------------------------


def candidates_csv(cands) -> bytes:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["instance", "v", "u"])
    for inst, v, u in cands:
        wr.writerow([inst, v, f"{u:.6f}"])
    return buf.getvalue().encode()


def cmd_postprocess(args) -> int:
    from .postprocess import ipm_from_calibration, postprocess_mask

    cfg = resolve_config(args)
    pc = cfg.postprocess
    masks = collect_pngs(Path(args.masks), "label")
    calib = read_calibration(args.calib, cfg)
    try:
        h = ipm_from_calibration(calib, pc.bev, pc.ground_height)
    except ValueError as e:
        raise UsageError(f"homography: {e}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t_all = time.perf_counter()
    times, failed, warnings = [], {}, {}
    for fid, path in masks.items():
        try:
            mask = read_mask_png(path)
        except KittiFormatError as e:
            log.error("%s", e)
            failed[fid] = str(e)
            continue
        if mask.shape != (calib.image_height, calib.image_width):
            failed[fid] = f"mask is {mask.shape[1]}x{mask.shape[0]}, calibration expects {calib.image_width}x{calib.image_height}"
            log.error("frame %s: %s", fid, failed[fid])
            continue
        t0 = time.perf_counter()
        res = postprocess_mask(mask, h, pc)
        times.append(time.perf_counter() - t0)
        adi_mod.write_png(out / "bev" / f"{fid}.png", res.bev.values)
        atomic_write_bytes(out / "candidates" / f"{fid}.csv", candidates_csv(res.candidates))
        write_json(out / "curves" / f"{fid}.json", {"frame": fid, "curves": [c.to_dict() for c in res.curves]})
        adi_mod.write_png(out / "final" / f"{fid}.png", res.final.values)
        if res.warnings:
            warnings[fid] = list(res.warnings)
    write_run_json(
        out,
        "postprocess",
        cfg,
        {"total_s": time.perf_counter() - t_all, "postprocess": percentiles(times)},
        frames=len(masks),
        failed=failed,
        warnings=warnings,
    )
    print(f"postprocess: {len(masks) - len(failed)}/{len(masks)} masks processed into {out}")
    return ERROR if failed else OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    from .evaluation import ConfusionCounts, match_with_tolerance, write_metrics_csv, write_metrics_json

    cfg = resolve_config(args)
    tol = cfg.eval.tolerance if args.tolerance is None else args.tolerance
    preds = collect_pngs(Path(args.pred), "final")
    gts = collect_pngs(Path(args.gt), "gt_bev")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    counts: dict[str, ConfusionCounts] = {}
    missing_gt = sorted(set(preds) - set(gts))
    missing_pred = sorted(set(gts) - set(preds))
    for fid in missing_gt:
        log.warning("frame %s: no ground truth", fid)
    for fid in sorted(set(preds) | set(gts)):
        if fid in missing_gt:
            continue
        try:
            g = read_mask_png(gts[fid])
            p = read_mask_png(preds[fid]) if fid in preds else np.zeros_like(g)
            counts[fid] = match_with_tolerance(p, g, tol)
        except (KittiFormatError, ValueError) as e:
            raise UsageError(f"frame {fid}: {e}") from None
    report = write_metrics_json(out / "metrics.json", counts)
    write_metrics_csv(out / "metrics.csv", counts)
    write_run_json(
        out,
        "eval",
        cfg,
        {"total_s": time.perf_counter() - t0},
        tolerance=tol,
        missing_gt=missing_gt,
        missing_pred=missing_pred,
    )
    for name, m in report["aggregate"].items():
        print(f"{name:5s} P={m['precision']:.4f} R={m['recall']:.4f} F1={m['f1']:.4f}")
    if missing_gt:
        return ERROR if args.strict else PARTIAL
    return OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def bench_frames(args, cfg: PipelineConfig):
    """``(cloud, calib, label_mask)`` triples to time."""
    from .annotator import detect_curbs_3d, render_label_mask
    from .synth import SceneSpec, generate_scene

    frames = []
    if args.dataset:
        root = Path(args.dataset)
        calib_path = args.calib or find_calibration(root)
        if calib_path is None:
            raise UsageError(f"{root}: no calib.txt found (pass --calib)")
        calib = read_calibration(calib_path, cfg)
        for path in frame_paths(root)[: args.frames]:
            try:
                cloud = load_frame(path, cfg)
            except (OSError, ValueError) as e:
                raise UsageError(str(e)) from None
            frames.append((cloud, calib, render_label_mask(detect_curbs_3d(cloud, cfg), calib, cfg.label.dilation_width)))
        if not frames:
            raise UsageError(f"{root}: no frames")
        return frames
    for i in range(args.frames):
        # building faces behind both sidewalks make nearly every ray return (~115k points)
        spec = SceneSpec(wall_setback=3.0, seed=args.seed + i)
        cloud, _, calib = generate_scene(spec)
        frames.append((cloud, calib, render_label_mask(detect_curbs_3d(cloud, cfg), calib, cfg.label.dilation_width)))
    return frames


def cmd_bench(args) -> int:
    from .annotator import cloud_to_adi
    from .postprocess import ipm_from_calibration, postprocess_mask

    if args.iterations <= 0:
        raise UsageError("nothing to measure: --iterations must be > 0")
    cfg = resolve_config(args)
    pc = cfg.postprocess
    frames = bench_frames(args, cfg)
    homs = [ipm_from_calibration(calib, pc.bev, pc.ground_height) for _, calib, _ in frames]

    def pre(k):
        cloud, calib, _ = frames[k]
        return cloud_to_adi(cloud, calib, cfg).values.tobytes()

    def post(k):
        res = postprocess_mask(frames[k][2], homs[k], pc)
        return res.final.values.tobytes() + json.dumps([c.to_dict() for c in res.curves]).encode()

    report = {"frames": len(frames), "points": [len(f[0]) for f in frames], "iterations": args.iterations, "warmup": args.warmup}
    for name, fn in (("pre", pre), ("post", post)):
        for i in range(args.warmup):
            fn(i % len(frames))
        ref = [None] * len(frames)
        samples, stable = [], True
        for i in range(args.iterations):
            k = i % len(frames)
            t0 = time.perf_counter()
            blob = fn(k)
            samples.append(time.perf_counter() - t0)
            if ref[k] is None:
                ref[k] = blob
            stable &= blob == ref[k]
        report[name] = {**percentiles(samples), "outputs_identical": bool(stable)}
        print(
            f"{name:4s} median {report[name]['median_ms']:.2f} ms  p95 {report[name]['p95_ms']:.2f} ms"
            f"  ({args.iterations} iterations, outputs identical: {stable})"
        )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "bench.json", report)
        write_run_json(out, "bench", cfg, {"pre": report["pre"], "post": report["post"]})
    return OK


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def load_scene_specs(path: str | None):
    from .synth import SceneSpec

    if path is None:
        return [SceneSpec()]
    try:
        data = json.loads(Path(path).read_text())
        if isinstance(data, dict) and "scenes" in data:
            data = data["scenes"]
        if isinstance(data, dict):
            data = [data]
        if not isinstance(data, list) or not data:
            raise ValueError("expected a scene object, a list of them, or {'scenes': [...]}")
        return [SceneSpec.from_dict(d) for d in data]
    except (OSError, ValueError, TypeError) as e:
        raise UsageError(f"invalid scene spec {path}: {e}") from None


def cmd_synth(args) -> int:
    from .postprocess import ipm_from_calibration
    from .synth import generate_scene, ground_truth_bev_via_image, scene_suite

    cfg = resolve_config(args)
    specs = scene_suite(args.suite, args.seed) if args.suite else load_scene_specs(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pc = cfg.postprocess
    t0 = time.perf_counter()
    calib_written = None
    for i, spec in enumerate(specs):
        fid = f"{i:06d}"
        cloud, truth, calib = generate_scene(spec)
        write_point_cloud(out / "velodyne" / f"{fid}.bin", cloud)
        write_ring_sidecar(out / "rings" / f"{fid}.bin", cloud)
        if calib_written is None:
            write_calibration(out / "calib.txt", calib, cfg.sensor.camera)
            calib_written = calib
        h = ipm_from_calibration(calib, pc.bev, pc.ground_height)
        gt = ground_truth_bev_via_image(truth, calib, h, pc.bev)
        adi_mod.write_png(out / "gt_bev" / f"{fid}.png", gt.values)
        write_json(
            out / "truth" / f"{fid}.json",
            {
                "spec": spec.to_dict(),
                "curbs": {side: list(spec.curb_coeffs(side)) for side in truth.polylines},
                "polylines": {side: np.round(line, 6).tolist() for side, line in truth.polylines.items()},
            },
        )
    write_json(out / "spec.json", {"scenes": [s.to_dict() for s in specs]})
    write_run_json(out, "synth", cfg, {"total_s": time.perf_counter() - t0}, frames=len(specs))
    print(f"synth: {len(specs)} scenes written to {out}")
    return OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (default: $ADICURB_CONFIG, then built-in defaults)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="adicurb", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("adi", parents=[common], help="point clouds -> altitude difference images")
    p.add_argument("inputs", nargs="+", help=".bin scans or dataset directories")
    p.add_argument("--calib", help="calibration file (default: calib.txt of the dataset)")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=default_jobs())
    p.set_defaults(func=cmd_adi)

    p = sub.add_parser("annotate", parents=[common], help="dataset -> ADI / label training pairs")
    p.add_argument("dataset")
    p.add_argument("--calib")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=default_jobs())
    p.add_argument("--strict", action="store_true", help="fail (exit 2) on any unreadable frame")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("postprocess", parents=[common], help="image masks -> BEV curves")
    p.add_argument("masks", help="directory of mask PNGs (or an annotate output with label/)")
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("eval", parents=[common], help="BEV predictions vs ground truth")
    p.add_argument("pred", help="prediction PNGs (or a postprocess output with final/)")
    p.add_argument("gt", help="ground-truth PNGs (or a synth output with gt_bev/)")
    p.add_argument("--out", required=True)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--strict", action="store_true", help="fail (exit 2) when a prediction has no ground truth")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="time pre- and post-processing")
    p.add_argument("--dataset", help="KITTI-style directory (default: synthetic frames)")
    p.add_argument("--calib")
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", parents=[common], help="write synthetic KITTI-format scenes")
    p.add_argument("spec", nargs="?", help="scene JSON (default: one default scene)")
    p.add_argument("--suite", type=int, default=0, help="write the N-scene evaluation suite instead")
    p.add_argument("--seed", type=int, default=0, help="base seed for --suite")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) and ERROR
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as e:
        print(f"adicurb {args.command}: error: {e}", file=sys.stderr)
        return ERROR


if __name__ == "__main__":
    sys.exit(main())
