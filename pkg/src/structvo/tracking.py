"""Frame-rate pose estimation: motion prediction, two-stage matching against
the previous frame and the local map, robust pose optimization and the
keyframe decision."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .errors import DomainError, TrackingLostError
from .geometry import (CameraIntrinsics, Pose, orientation_discrepancy, project)
from .line_init import normalize_response
from .residuals import LineReprojectionResidual, PointReprojectionResidual
from .solver import (HuberLoss, LineEndpointsBlock, PointBlock, PoseBlock,
                     Problem, SolverOptions, solve)
from .track_io import FrameData


class Frame:
    """Per-frame working state: observations, fitted 3D lines, pose, matches."""

    def __init__(self, data: FrameData, intrinsics: CameraIntrinsics, index: int):
        self.index = index
        self.timestamp = data.timestamp
        self.intrinsics = intrinsics
        self.points = data.points
        self.lines = data.lines
        self.normals = data.normals
        self.gt_pose_wc = data.gt_pose_wc
        self.line_segments = [None] * len(self.lines)  # camera-frame fits
        self.line_fit_rms = [0.0] * len(self.lines)
        self.pose_cw: Pose | None = None
        self.point_matches: dict[int, int] = {}  # obs index -> landmark id
        self.line_matches: dict[int, int] = {}

    def tracked_count(self):
        return len(self.point_matches) + len(self.line_matches)

    def creatable_count(self):
        """Observations with a valid 3D estimate not matched to any landmark."""
        n = sum(1 for i, p in enumerate(self.points)
                if p.depth > 0 and i not in self.point_matches)
        n += sum(1 for i in range(len(self.lines))
                 if self.line_segments[i] is not None and i not in self.line_matches)
        return n


@dataclass
class MapSnapshot:
    """Read-only landmark view handed from mapping to tracking."""

    points: dict = field(default_factory=dict)        # id -> (3,) world
    lines: dict = field(default_factory=dict)         # id -> (start, end) world
    point_by_external: dict = field(default_factory=dict)
    line_by_external: dict = field(default_factory=dict)

    def restricted(self, point_ids, line_ids):
        pts = {i: self.points[i] for i in point_ids if i in self.points}
        lns = {i: self.lines[i] for i in line_ids if i in self.lines}
        return MapSnapshot(
            points=pts, lines=lns,
            point_by_external={e: i for e, i in self.point_by_external.items() if i in pts},
            line_by_external={e: i for e, i in self.line_by_external.items() if i in lns})


class MotionModel:
    """Constant-velocity prediction; the relative transform between the last
    two frames is replayed onto the newest pose."""

    def __init__(self):
        self.relative = Pose.identity()

    def predict(self, previous_cw: Pose) -> Pose:
        return self.relative.compose(previous_cw)

    def update(self, previous_cw: Pose, current_cw: Pose):
        self.relative = current_cw.compose(previous_cw.inverse())


def point_reproj_error(pixel, point_w, pose_cw: Pose, omega=1.0,
                       intrinsics: CameraIntrinsics | None = None):
    """Squared reprojection distance, weighted by the inverse response."""
    pc = pose_cw.transform(point_w)
    if pc[2] <= 0:
        raise DomainError("map point behind the camera")
    diff = np.asarray(pixel, dtype=float) - project(intrinsics, pc)
    return float(diff @ diff) / omega


def line_reproj_error(coefficients, start_w, end_w, pose_cw: Pose, omega=1.0,
                      intrinsics: CameraIntrinsics | None = None):
    """Squared 2-norm of both projected-endpoint distances to the observed line."""
    n = np.asarray(coefficients, dtype=float)
    total = 0.0
    for pw in (start_w, end_w):
        pc = pose_cw.transform(pw)
        if pc[2] <= 0:
            raise DomainError("map line endpoint behind the camera")
        px = project(intrinsics, pc)
        d = n[:2] @ px + n[2]
        total += d * d
    return total / omega


def match_to_map(frame: Frame, snapshot: MapSnapshot, predicted_cw: Pose, mode: str,
                 cfg: RunConfig, skip_points=(), skip_lines=()):
    """Associate observations with landmarks; at most one match each way."""
    point_matches: dict[int, int] = {}
    line_matches: dict[int, int] = {}

    if mode == "oracle":
        used_p, used_l = set(), set()
        for i, p in enumerate(frame.points):
            if i in skip_points or p.landmark_id is None:
                continue
            lm = snapshot.point_by_external.get(p.landmark_id)
            if lm is not None and lm not in used_p:
                point_matches[i] = lm
                used_p.add(lm)
        for i, ln in enumerate(frame.lines):
            if i in skip_lines or ln.landmark_id is None:
                continue
            lm = snapshot.line_by_external.get(ln.landmark_id)
            if lm is not None and lm not in used_l:
                line_matches[i] = lm
                used_l.add(lm)
        return point_matches, line_matches

    intr = frame.intrinsics
    # points: greedy nearest within the search radius
    candidates = []
    for lm_id in sorted(snapshot.points):
        pc = predicted_cw.transform(snapshot.points[lm_id])
        if pc[2] <= 0:
            continue
        px = project(intr, pc)
        if not intr.in_image(px):
            continue
        for i, p in enumerate(frame.points):
            if i in skip_points:
                continue
            d = float(np.hypot(p.u - px[0], p.v - px[1]))
            if d < cfg.point_search_radius_px:
                candidates.append((d, lm_id, i))
    used_obs, used_lm = set(), set()
    for d, lm_id, i in sorted(candidates):
        if i in used_obs or lm_id in used_lm:
            continue
        point_matches[i] = lm_id
        used_obs.add(i)
        used_lm.add(lm_id)

    # lines: both endpoint distances inside the gate + direction agreement
    gate_cos = np.cos(np.radians(cfg.line_direction_gate_deg))
    candidates = []
    for lm_id in sorted(snapshot.lines):
        start_w, end_w = snapshot.lines[lm_id]
        ps = predicted_cw.transform(start_w)
        pe = predicted_cw.transform(end_w)
        if ps[2] <= 0 or pe[2] <= 0:
            continue
        px_s, px_e = project(intr, ps), project(intr, pe)
        seg_dir = px_e - px_s
        norm = np.linalg.norm(seg_dir)
        if norm < 1e-9:
            continue
        seg_dir = seg_dir / norm
        for i, ln in enumerate(frame.lines):
            if i in skip_lines:
                continue
            d_s = abs(ln.pixel_distance(px_s))
            d_e = abs(ln.pixel_distance(px_e))
            if d_s >= cfg.line_search_radius_px or d_e >= cfg.line_search_radius_px:
                continue
            if abs(float(seg_dir @ ln.direction)) <= gate_cos:
                continue
            candidates.append((d_s + d_e, lm_id, i))
    used_obs, used_lm = set(), set()
    for d, lm_id, i in sorted(candidates):
        if i in used_obs or lm_id in used_lm:
            continue
        line_matches[i] = lm_id
        used_obs.add(i)
        used_lm.add(lm_id)
    return point_matches, line_matches


def build_pose_problem(frame: Frame, point_matches, line_matches, snapshot: MapSnapshot,
                       pose_cw: Pose, cfg: RunConfig):
    """Reprojection-only problem over a single free pose block.

    Matches whose landmark sits behind the camera are excluded and reported.
    """
    problem = Problem()
    pose_block = PoseBlock(pose_cw)
    problem.add_block(pose_block)
    loss = HuberLoss(cfg.huber_delta_px) if cfg.robust_loss else None
    excluded = []
    for i in sorted(point_matches):
        lm_id = point_matches[i]
        pw = snapshot.points[lm_id]
        if pose_cw.transform(pw)[2] <= 0:
            excluded.append(("point", i))
            continue
        obs = frame.points[i]
        omega = 1.0 / normalize_response(obs.response, cfg.response_floor)
        problem.add_residual(PointReprojectionResidual(
            pose_block, PointBlock(pw, fixed=True), obs.pixel, omega, frame.intrinsics), loss)
    for i in sorted(line_matches):
        lm_id = line_matches[i]
        start_w, end_w = snapshot.lines[lm_id]
        pc_s = pose_cw.transform(start_w)
        pc_e = pose_cw.transform(end_w)
        if pc_s[2] <= 0 or pc_e[2] <= 0:
            excluded.append(("line", i))
            continue
        obs = frame.lines[i]
        omega = 1.0 / normalize_response(obs.response, cfg.response_floor)
        problem.add_residual(LineReprojectionResidual(
            pose_block, LineEndpointsBlock(start_w, end_w, fixed=True),
            obs.coefficients, omega, frame.intrinsics), loss)
    return problem, pose_block, excluded


def _residual_outliers(frame, point_matches, line_matches, snapshot, pose_cw, cfg):
    """Chi-square gating on unweighted pixel residuals (2 dof each)."""
    gate = cfg.chi2_threshold * cfg.assumed_pixel_sigma**2
    bad_points, bad_lines = set(), set()
    for i, lm_id in point_matches.items():
        try:
            e = point_reproj_error(frame.points[i].pixel, snapshot.points[lm_id],
                                   pose_cw, 1.0, frame.intrinsics)
        except DomainError:
            bad_points.add(i)
            continue
        if e > gate:
            bad_points.add(i)
    for i, lm_id in line_matches.items():
        start_w, end_w = snapshot.lines[lm_id]
        try:
            e = line_reproj_error(frame.lines[i].coefficients, start_w, end_w,
                                  pose_cw, 1.0, frame.intrinsics)
        except DomainError:
            bad_lines.add(i)
            continue
        if e > gate:
            bad_lines.add(i)
    return bad_points, bad_lines


@dataclass
class TrackingResult:
    pose_cw: Pose
    stage1_report: object
    stage2_report: object
    n_stage1_matches: int
    n_stage2_matches: int
    n_outliers: int


def estimate_pose(frame: Frame, prev_frame: Frame, snapshot: MapSnapshot,
                  predicted_cw: Pose, cfg: RunConfig) -> TrackingResult:
    """Two-stage pose estimation.

    Stage 1 matches against the landmarks observed in the previous frame and
    optimizes; outliers are removed; stage 2 re-matches against the whole
    local map and optimizes again.
    """
    prev_points = set(prev_frame.point_matches.values())
    prev_lines = set(prev_frame.line_matches.values())
    stage1_map = snapshot.restricted(prev_points, prev_lines)
    pm, lm = match_to_map(frame, stage1_map, predicted_cw, cfg.matching, cfg)
    if len(pm) + len(lm) < 3:
        raise TrackingLostError(
            f"frame {frame.index}: only {len(pm) + len(lm)} matches to the previous frame",
            predicted_pose=predicted_cw)

    problem, pose_block, _ = build_pose_problem(frame, pm, lm, snapshot, predicted_cw, cfg)
    report1 = solve(problem, SolverOptions.for_pose(cfg))
    pose1 = pose_block.pose

    bad_p, bad_l = _residual_outliers(frame, pm, lm, snapshot, pose1, cfg)

    pm2, lm2 = match_to_map(frame, snapshot, pose1, cfg.matching, cfg,
                            skip_points=bad_p, skip_lines=bad_l)
    if len(pm2) + len(lm2) < 3:
        raise TrackingLostError(
            f"frame {frame.index}: only {len(pm2) + len(lm2)} matches to the local map",
            predicted_pose=pose1)
    problem2, pose_block2, _ = build_pose_problem(frame, pm2, lm2, snapshot, pose1, cfg)
    report2 = solve(problem2, SolverOptions.for_pose(cfg))
    pose2 = pose_block2.pose

    bad_p2, bad_l2 = _residual_outliers(frame, pm2, lm2, snapshot, pose2, cfg)
    frame.point_matches = {i: l for i, l in pm2.items() if i not in bad_p2}
    frame.line_matches = {i: l for i, l in lm2.items() if i not in bad_l2}
    frame.pose_cw = pose2
    return TrackingResult(pose_cw=pose2, stage1_report=report1, stage2_report=report2,
                          n_stage1_matches=len(pm) + len(lm),
                          n_stage2_matches=len(pm2) + len(lm2),
                          n_outliers=len(bad_p) + len(bad_l) + len(bad_p2) + len(bad_l2))


def keyframe_decision(tracked: int, creatable: int, frames_since_keyframe: int,
                      cfg: RunConfig) -> bool:
    """New keyframe iff the tracked-feature ratio drops below the threshold."""
    if tracked < 0 or creatable < 0:
        raise ValueError("counts must be non-negative")
    if tracked + creatable == 0:
        raise ValueError("keyframe decision requires tracked + creatable > 0")
    ratio = tracked / (tracked + creatable)
    return ratio < cfg.keyframe_ratio and frames_since_keyframe >= cfg.keyframe_min_gap
