"""Feature-track file format: the one ingestion path for simulated and
external data.

Line-delimited text, one self-describing record per line ("<tag> <json>"),
so files diff cleanly and stream. Record tags:

    H  header: format version, intrinsics, depth scale
    F  frame start: timestamp, optional ground-truth camera-in-world pose
    P  point observation: u, v, depth, response, optional landmark id
    L  line observation: endpoints, response, samples, optional landmark id
    N  grid surface normals (camera frame): [[u, v, nx, ny, nz], ...]
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import TrackFileError
from .geometry import CameraIntrinsics, LineObservation, PixelPoint, Pose

FORMAT_VERSION = 1


@dataclass
class FrameData:
    """Everything the pipeline consumes for one frame."""

    timestamp: float
    points: list = field(default_factory=list)        # list[PixelPoint]
    lines: list = field(default_factory=list)         # list[LineObservation]
    normals: np.ndarray = None                        # (M, 5): u, v, nx, ny, nz
    gt_pose_wc: Pose | None = None                    # camera-in-world, if known


def _pose_record(pose: Pose):
    # translation + row-major rotation: exact (bitwise) round trips
    return list(pose.translation) + list(pose.rotation.ravel())


def _pose_from_record(rec):
    t = np.asarray(rec[:3], dtype=float)
    R = np.asarray(rec[3:12], dtype=float).reshape(3, 3)
    return Pose(R, t)


def write_feature_tracks(path, intrinsics: CameraIntrinsics, frames):
    """Write header + per-frame records for an iterable of FrameData."""
    with open(path, "w") as fh:
        header = {
            "version": FORMAT_VERSION,
            "fx": intrinsics.fx, "fy": intrinsics.fy,
            "cx": intrinsics.cx, "cy": intrinsics.cy,
            "width": intrinsics.width, "height": intrinsics.height,
            "depth_scale": intrinsics.depth_scale,
        }
        fh.write("H " + json.dumps(header) + "\n")
        for frame in frames:
            rec = {"t": frame.timestamp}
            if frame.gt_pose_wc is not None:
                rec["gt"] = _pose_record(frame.gt_pose_wc)
            fh.write("F " + json.dumps(rec) + "\n")
            for p in frame.points:
                rec = {"u": p.u, "v": p.v, "d": p.depth, "r": p.response}
                if p.landmark_id is not None:
                    rec["id"] = p.landmark_id
                fh.write("P " + json.dumps(rec) + "\n")
            for ln in frame.lines:
                rec = {
                    "s": list(ln.s), "e": list(ln.e), "r": ln.response,
                    "samples": np.column_stack([ln.sample_px, ln.sample_depth]).tolist(),
                }
                if ln.landmark_id is not None:
                    rec["id"] = ln.landmark_id
                fh.write("L " + json.dumps(rec) + "\n")
            if frame.normals is not None and len(frame.normals):
                fh.write("N " + json.dumps({"grid": np.asarray(frame.normals).tolist()}) + "\n")


def _validate_pixel(u, v, intr, lineno, what):
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise TrackFileError(f"{what} pixel ({u}, {v}) outside image bounds", lineno)


def read_feature_tracks(path):
    """Parse a feature-track file -> (CameraIntrinsics, list[FrameData])."""
    intr = None
    frames: list[FrameData] = []
    last_t = None
    try:
        fh = open(path)
    except OSError as exc:
        raise TrackFileError(f"cannot open {path}: {exc}") from exc
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.rstrip("\n")
            if not raw.strip():
                continue
            tag, _, payload = raw.partition(" ")
            try:
                rec = json.loads(payload)
            except json.JSONDecodeError as exc:
                raise TrackFileError(f"bad JSON payload: {exc}", lineno) from exc
            if tag == "H":
                version = rec.get("version")
                if version != FORMAT_VERSION:
                    raise TrackFileError(
                        f"unsupported format version {version!r} (expected {FORMAT_VERSION})", lineno)
                try:
                    intr = CameraIntrinsics(
                        fx=rec["fx"], fy=rec["fy"], cx=rec["cx"], cy=rec["cy"],
                        width=rec["width"], height=rec["height"],
                        depth_scale=rec.get("depth_scale", 1.0))
                except KeyError as exc:
                    raise TrackFileError(f"header missing field {exc}", lineno) from exc
            elif tag == "F":
                if intr is None:
                    raise TrackFileError("frame record before header", lineno)
                t = float(rec["t"])
                if last_t is not None and t <= last_t:
                    raise TrackFileError(f"timestamps must strictly increase ({t} after {last_t})", lineno)
                last_t = t
                gt = _pose_from_record(rec["gt"]) if "gt" in rec else None
                frames.append(FrameData(timestamp=t, gt_pose_wc=gt))
            elif tag == "P":
                if not frames:
                    raise TrackFileError("point record before any frame", lineno)
                try:
                    _validate_pixel(rec["u"], rec["v"], intr, lineno, "point")
                    frames[-1].points.append(PixelPoint(
                        u=rec["u"], v=rec["v"], depth=rec.get("d", 0.0),
                        response=rec.get("r", 1.0), landmark_id=rec.get("id")))
                except KeyError as exc:
                    raise TrackFileError(f"point record missing field {exc}", lineno) from exc
            elif tag == "L":
                if not frames:
                    raise TrackFileError("line record before any frame", lineno)
                try:
                    samples = np.asarray(rec["samples"], dtype=float).reshape(-1, 3)
                    s, e = rec["s"], rec["e"]
                except (KeyError, ValueError) as exc:
                    raise TrackFileError(f"bad line record: {exc}", lineno) from exc
                _validate_pixel(s[0], s[1], intr, lineno, "line start")
                _validate_pixel(e[0], e[1], intr, lineno, "line end")
                frames[-1].lines.append(LineObservation(
                    s=s, e=e, response=rec.get("r", 1.0),
                    sample_px=samples[:, :2], sample_depth=samples[:, 2],
                    landmark_id=rec.get("id")))
            elif tag == "N":
                if not frames:
                    raise TrackFileError("normals record before any frame", lineno)
                frames[-1].normals = np.asarray(rec["grid"], dtype=float).reshape(-1, 5)
            else:
                raise TrackFileError(f"unknown record tag {tag!r}", lineno)
    if intr is None:
        raise TrackFileError("file has no header record")
    return intr, frames
