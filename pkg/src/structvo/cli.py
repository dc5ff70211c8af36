"""Command-line harness: simulate, run, eval, ablate.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 tracking failure,
5 numerical failure. Log verbosity comes from the STRUCTVO_LOG environment
variable (debug | info | warning).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ABLATION_VARIANTS, RunConfig
from .errors import (ConfigError, NumericalError, StructVOError, TrackFileError,
                     TrackingLostError)
from .evaluation import ape_errors, ape_rmse, read_trajectory, write_trajectory
from .geometry import CameraIntrinsics, Pose, rotation_from_quaternion
from .pipeline import run_sequence
from .simworld import (NoiseSpec, SceneSpec, TrajectorySpec, default_intrinsics,
                       orbit_waypoints, simulate_sequence)
from .track_io import read_feature_tracks, write_feature_tracks

log = logging.getLogger("structvo")

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_TRACKING = 4
EXIT_NUMERICAL = 5


def _setup_logging():
    level = os.environ.get("STRUCTVO_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise TrackFileError(f"cannot open {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _intrinsics_from_dict(data):
    if data is None:
        return default_intrinsics()
    try:
        return CameraIntrinsics(**data)
    except TypeError as exc:
        raise ConfigError(f"bad intrinsics: {exc}") from exc


def _trajectory_from_dict(data):
    kind = data.get("kind", "orbit")
    fps = data.get("frames_per_segment", 10)
    rate = data.get("frame_rate", 30.0)
    if kind == "orbit":
        waypoints = orbit_waypoints(
            radius=data.get("radius", 2.0), n_waypoints=data.get("n_waypoints", 5),
            arc_deg=data.get("arc_deg", 120.0), height=data.get("height", 0.0),
            outward=data.get("outward", False))
    elif kind == "waypoints":
        waypoints = []
        for rec in data["poses"]:
            t = np.asarray(rec[:3], dtype=float)
            R = rotation_from_quaternion(rec[3:7])
            waypoints.append(Pose(R, t))
    else:
        raise ConfigError(f"unknown trajectory kind {kind!r}")
    return TrajectorySpec(waypoints=waypoints, frames_per_segment=fps, frame_rate=rate)


def cmd_simulate(args):
    spec = _load_json(args.scene)
    seed = args.seed if args.seed is not None else spec.get("seed", 0)
    scene_spec = SceneSpec.from_dict(spec.get("scene", {}))
    noise_args = dict(spec.get("noise", {}))
    noise_args["seed"] = seed
    noise = NoiseSpec.from_dict(noise_args)
    traj_spec = _trajectory_from_dict(spec.get("trajectory", {}))
    intrinsics = _intrinsics_from_dict(spec.get("intrinsics"))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene, frames = simulate_sequence(scene_spec, traj_spec, intrinsics, noise)
    write_feature_tracks(out / "tracks.svt", intrinsics, frames)
    write_trajectory(out / "groundtruth.txt",
                     [(f.timestamp, f.gt_pose_wc) for f in frames])
    print(f"simulate: {len(frames)} frames, {scene.points.shape[0]} points, "
          f"{len(scene.lines)} lines -> {out}")
    return 0


def _write_manifest(path, cfg, result, n_frames, elapsed_s):
    lines = [
        f"config_hash {cfg.digest()}",
        f"seed {cfg.seed}",
        f"frames {n_frames}",
        f"keyframes {result.n_keyframes}",
        f"lost_frames {result.lost_frames}",
        f"elapsed_s {elapsed_s:.3f}",
    ]
    for stage, ms in sorted(result.timings_ms.items()):
        lines.append(f"timing_{stage}_ms {ms:.1f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    if result.axes.valid:
        record = " ".join(repr(float(v)) for v in result.axes.axes.ravel())
        with open(path, "a") as fh:
            fh.write(f"MA {record}\n")


def _run_pipeline(input_path, cfg, out_dir, deterministic):
    intrinsics, frames = read_feature_tracks(input_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    result = run_sequence(frames, intrinsics, cfg, deterministic=deterministic)
    elapsed = time.perf_counter() - t0
    write_trajectory(out / "trajectory.txt", result.trajectory)
    result.local_map.export_lines_csv(out / "map_lines.csv")
    _write_manifest(out / "manifest.txt", cfg, result, len(frames), elapsed)
    return result, frames


def cmd_run(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    result, frames = _run_pipeline(args.input, cfg, args.out, args.deterministic)
    print(f"run: {len(result.trajectory)} poses, {result.n_keyframes} keyframes, "
          f"axes {result.axes.state} -> {args.out}")
    return 0


def cmd_eval(args):
    est = read_trajectory(args.est)
    ref = read_trajectory(args.ref)
    stamps, terr, rerr = ape_errors(est, ref, mode=args.mode)
    rmse = float(np.sqrt(np.mean(terr**2)))
    print(f"APE RMSE: {rmse:.6f} m over {len(stamps)} poses")
    print(f"  translation: mean {terr.mean():.6f} m, median {np.median(terr):.6f} m, "
          f"max {terr.max():.6f} m")
    print(f"  rotation (supplementary): rmse {np.degrees(np.sqrt(np.mean(rerr**2))):.4f} deg")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("timestamp,translation_error_m,rotation_error_rad\n")
            for t, te, re in zip(stamps, terr, rerr):
                fh.write(f"{t:.9f},{te:.9e},{re:.9e}\n")
    return 0


def cmd_ablate(args):
    base = RunConfig.load(args.config) if args.config else RunConfig()
    intrinsics, frames = read_feature_tracks(args.input)
    reference = [(f.timestamp, f.gt_pose_wc) for f in frames if f.gt_pose_wc is not None]
    if len(reference) < 3:
        raise TrackFileError("ablate requires ground-truth poses in the input file")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant in ABLATION_VARIANTS:
        cfg = base.ablation(variant)
        vdir = out / variant
        vdir.mkdir(exist_ok=True)
        t0 = time.perf_counter()
        result = run_sequence(frames, intrinsics, cfg, deterministic=True)
        elapsed = time.perf_counter() - t0
        write_trajectory(vdir / "trajectory.txt", result.trajectory)
        result.local_map.export_lines_csv(vdir / "map_lines.csv")
        _write_manifest(vdir / "manifest.txt", cfg, result, len(frames), elapsed)
        rmse = ape_rmse(result.trajectory, reference)
        rows.append((variant, rmse, result.n_keyframes, result.axes.state, elapsed))

    with open(out / "summary.csv", "w") as fh:
        fh.write("variant,ape_rmse_m,keyframes,axes_state,elapsed_s\n")
        for variant, rmse, nkf, axes_state, elapsed in rows:
            fh.write(f"{variant},{rmse:.9f},{nkf},{axes_state},{elapsed:.3f}\n")

    width = max(len(v) for v, *_ in rows)
    print(f"{'variant':<{width}}  {'APE RMSE [m]':>12}  {'keyframes':>9}  axes")
    for variant, rmse, nkf, axes_state, _ in rows:
        print(f"{variant:<{width}}  {rmse:12.6f}  {nkf:9d}  {axes_state}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="structvo",
        description="Point+line visual odometry with structural and Manhattan-axes "
                    "constraints, plus a synthetic Manhattan-world test harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic sequence")
    p.add_argument("--scene", required=True, help="scene JSON (scene/noise/trajectory/intrinsics)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the scene seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run the odometry on a feature-track file")
    p.add_argument("--input", required=True, help="feature-track file")
    p.add_argument("--config", default=None, help="RunConfig JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded interleaved mode (bitwise reproducible)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="APE RMSE of an estimate against a reference")
    p.add_argument("--est", required=True, help="estimated trajectory (TUM format)")
    p.add_argument("--ref", required=True, help="reference trajectory (TUM format)")
    p.add_argument("--mode", choices=("se3", "sim3"), default="se3")
    p.add_argument("--csv", default=None, help="write per-frame errors to this CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the three standard configurations and compare")
    p.add_argument("--input", required=True, help="feature-track file with ground truth")
    p.add_argument("--config", default=None, help="base RunConfig JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrackFileError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrackingLostError as exc:
        print(f"tracking failure: {exc}", file=sys.stderr)
        return EXIT_TRACKING
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except StructVOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
