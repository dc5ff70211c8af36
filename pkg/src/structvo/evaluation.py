"""Trajectory files (TUM convention), closed-form alignment and APE metrics."""

from __future__ import annotations

import numpy as np

from .errors import InsufficientOverlapError, TrackFileError
from .geometry import Pose, quaternion_from_rotation, rotation_from_quaternion

ASSOCIATION_WINDOW = 0.02  # seconds


def write_trajectory(path, stamped_poses):
    """Write [(timestamp, Pose camera-in-world)] as TUM lines."""
    with open(path, "w") as fh:
        last_t = None
        for t, pose in stamped_poses:
            if last_t is not None and t <= last_t:
                raise TrackFileError(f"timestamps must strictly increase ({t} after {last_t})")
            last_t = t
            q = quaternion_from_rotation(pose.rotation)
            tx, ty, tz = pose.translation
            fh.write(f"{t:.9f} {tx:.9f} {ty:.9f} {tz:.9f} "
                     f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n")


def read_trajectory(path):
    """Parse a TUM trajectory file -> [(timestamp, Pose)]."""
    out = []
    last_t = None
    try:
        fh = open(path)
    except OSError as exc:
        raise TrackFileError(f"cannot open {path}: {exc}") from exc
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw or raw.startswith("#"):
                continue
            parts = raw.split()
            if len(parts) != 8:
                raise TrackFileError("expected 8 fields (t tx ty tz qx qy qz qw)", lineno)
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise TrackFileError(f"bad number: {exc}", lineno) from exc
            t, tx, ty, tz, qx, qy, qz, qw = vals
            qn = np.linalg.norm([qx, qy, qz, qw])
            if abs(qn - 1.0) > 1e-6:
                raise TrackFileError(f"quaternion norm {qn} deviates from 1", lineno)
            if last_t is not None and t <= last_t:
                raise TrackFileError("timestamps must strictly increase", lineno)
            last_t = t
            out.append((t, Pose(rotation_from_quaternion([qx, qy, qz, qw]),
                                np.array([tx, ty, tz]))))
    return out


def associate(estimate, reference, max_dt=ASSOCIATION_WINDOW):
    """Greedy nearest-timestamp association; each pose used at most once."""
    pairs = []
    for i, (t_e, _) in enumerate(estimate):
        for j, (t_r, _) in enumerate(reference):
            dt = abs(t_e - t_r)
            if dt <= max_dt:
                pairs.append((dt, i, j))
    pairs.sort()
    used_e, used_r = set(), set()
    matches = []
    for dt, i, j in pairs:
        if i in used_e or j in used_r:
            continue
        matches.append((i, j))
        used_e.add(i)
        used_r.add(j)
    matches.sort()
    return matches


def umeyama_align(estimate, reference, mode="se3", max_dt=ASSOCIATION_WINDOW):
    """Closed-form transform minimizing sum ||ref_i - T(est_i)||^2.

    Returns (scale, rotation, translation): ref ~ scale * R @ est + t.
    mode "se3" pins scale to 1; "sim3" estimates it.
    """
    matches = associate(estimate, reference, max_dt)
    if len(matches) < 3:
        raise InsufficientOverlapError(
            f"only {len(matches)} associated pose pairs; need at least 3")
    est = np.array([estimate[i][1].translation for i, _ in matches])
    ref = np.array([reference[j][1].translation for _, j in matches])

    mu_e = est.mean(axis=0)
    mu_r = ref.mean(axis=0)
    de = est - mu_e
    dr = ref - mu_r
    cov = dr.T @ de / len(matches)
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    if mode == "sim3":
        var_e = (de**2).sum() / len(matches)
        scale = float(np.trace(np.diag(S) @ D) / var_e) if var_e > 0 else 1.0
    elif mode == "se3":
        scale = 1.0
    else:
        raise ValueError(f"unknown alignment mode {mode!r}")
    t = mu_r - scale * (R @ mu_e)
    return scale, R, t


def ape_errors(estimate, reference, mode="se3", max_dt=ASSOCIATION_WINDOW):
    """Per-pose absolute errors after alignment.

    Returns (timestamps, translation errors [m], rotation errors [rad]).
    """
    scale, R, t = umeyama_align(estimate, reference, mode, max_dt)
    matches = associate(estimate, reference, max_dt)
    stamps, terr, rerr = [], [], []
    for i, j in matches:
        t_e, pose_e = estimate[i]
        _, pose_r = reference[j]
        pos = scale * (R @ pose_e.translation) + t
        stamps.append(t_e)
        terr.append(float(np.linalg.norm(pose_r.translation - pos)))
        dR = (R @ pose_e.rotation).T @ pose_r.rotation
        angle = np.arccos(np.clip((np.trace(dR) - 1.0) / 2.0, -1.0, 1.0))
        rerr.append(float(angle))
    return np.asarray(stamps), np.asarray(terr), np.asarray(rerr)


def ape_rmse(estimate, reference, mode="se3", max_dt=ASSOCIATION_WINDOW):
    """RMSE of the absolute position error (meters) after alignment."""
    _, terr, _ = ape_errors(estimate, reference, mode, max_dt)
    return float(np.sqrt(np.mean(terr**2)))
