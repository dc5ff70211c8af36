"""Sequence runner: wires line initialization, tracking, mapping and the
Manhattan-axes lifecycle into one odometry pipeline.

Two execution modes share all logic: `deterministic=True` interleaves
tracking and mapping in one thread (bitwise-reproducible runs for tests and
evaluation); otherwise mapping runs on a worker thread consuming completed
keyframes from an ordered queue, with tracking reading consistent map
snapshots under a lock.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .errors import TrackingLostError
from .geometry import CameraIntrinsics, Pose
from .line_init import (backproject_endpoints, pair_structural_candidates,
                        refine_endpoints_structural, robust_fit_line_3d)
from .manhattan import (COARSE, ManhattanAxes, coarse_estimate, deduped_normals,
                        refine_axes)
from .mapping import LocalMap
from .tracking import (Frame, MotionModel, estimate_pose, keyframe_decision,
                       match_to_map)

log = logging.getLogger("structvo.pipeline")


@dataclass
class _PrevView:
    """Race-free view of the previous frame's matches for stage-1 tracking."""

    point_matches: dict
    line_matches: dict

    def tracked_count(self):
        return len(self.point_matches) + len(self.line_matches)


@dataclass
class RunResult:
    trajectory: list                 # [(timestamp, Pose camera-in-world)]
    local_map: LocalMap
    axes: ManhattanAxes
    timings_ms: dict
    n_keyframes: int
    lost_frames: int
    reports: list = field(default_factory=list)


def _fit_frame_lines(frame: Frame, cfg: RunConfig, frame_index: int):
    for j, obs in enumerate(frame.lines):
        if cfg.depth_fit:
            rng = np.random.default_rng([cfg.seed, frame_index, j])
            fit = robust_fit_line_3d(obs, frame.intrinsics, cfg, rng=rng)
        else:
            fit = backproject_endpoints(obs, frame.intrinsics)
        frame.line_segments[j] = fit.segment
        frame.line_fit_rms[j] = fit.rms


def _refine_frame_lines(frame: Frame, cfg: RunConfig):
    idx = [j for j, seg in enumerate(frame.line_segments) if seg is not None]
    if len(idx) < 2:
        return
    segments = [frame.line_segments[j] for j in idx]
    responses = [frame.lines[j].response for j in idx]
    rms = [frame.line_fit_rms[j] for j in idx]
    pairs = pair_structural_candidates(segments, responses,
                                       cfg.theta_par_deg, cfg.theta_perp_deg)
    if len(pairs) == 0:
        return
    refined, _ = refine_endpoints_structural(segments, pairs, responses, rms, cfg)
    for j, seg in zip(idx, refined):
        frame.line_segments[j] = seg


class _MappingState:
    """Map + axes lifecycle; all mutation happens through process_keyframe."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.local_map = LocalMap(cfg)
        self.axes = ManhattanAxes.unavailable()
        self.timings = {"insert": 0.0, "optimize": 0.0, "manhattan": 0.0, "cull": 0.0}

    def _try_coarse(self, kf):
        # evidence: every map line once (unique structures), plus this
        # keyframe's surface normals (deduplicated per plane)
        pose_wc = kf.pose_cw.inverse()
        dirs = [self.local_map.lines[lid].direction()
                for lid in sorted(self.local_map.lines)]
        dirs += deduped_normals(kf.frame.normals, pose_wc)
        dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
        if dirs.shape[0] == 0:
            return
        for guess in (np.eye(3), pose_wc.rotation):
            axes = coarse_estimate(dirs, guess, self.cfg)
            if axes.valid:
                self.axes = axes
                log.info("coarse Manhattan axes from keyframe %d (support %s)",
                         kf.id, axes.support)
                return

    def _axis_observations(self):
        obs = []
        for kf_id in sorted(self.local_map.keyframes):
            kf = self.local_map.keyframes[kf_id]
            R_wc = kf.pose_cw.inverse().rotation
            for i, lid in sorted(kf.line_matches.items()):
                line = self.local_map.lines.get(lid)
                if line is None or line.axis is None:
                    continue
                seg = kf.frame.line_segments[i]
                if seg is None:
                    continue
                obs.append((R_wc @ seg.direction, line.axis))
        return obs

    def _try_refine(self):
        if len(self.local_map.keyframes) < self.cfg.ma_min_keyframes:
            return
        refined, report = refine_axes(self.axes, self._axis_observations(), self.cfg)
        if refined.state != self.axes.state:
            log.info("Manhattan axes refined (report: %s)", report)
            self.axes = refined
            self.local_map.reassociate_all_lines(self.axes)

    def process_keyframe(self, frame: Frame):
        cfg = self.cfg
        t0 = time.perf_counter()
        kf = self.local_map.insert_keyframe(frame)
        # expose fused/created landmark ids to the tracking side
        frame.point_matches = dict(kf.point_matches)
        frame.line_matches = dict(kf.line_matches)
        if cfg.structural_refinement:
            self.local_map.associate_structural(kf)
        t1 = time.perf_counter()
        self.timings["insert"] += (t1 - t0) * 1e3

        if cfg.manhattan:
            if not self.axes.valid:
                self._try_coarse(kf)
                if self.axes.valid:
                    self.local_map.reassociate_all_lines(self.axes)
            else:
                for lid in sorted(set(kf.line_matches.values())):
                    line = self.local_map.lines[lid]
                    if line.axis is None:
                        line.axis = self.local_map.associate_manhattan(line, self.axes)
            if self.axes.state == COARSE:
                self._try_refine()
        t2 = time.perf_counter()
        self.timings["manhattan"] += (t2 - t1) * 1e3

        if len(self.local_map.keyframes) > 1:
            self.local_map.optimize_local(kf.id, axes=self.axes if cfg.manhattan else None)
        t3 = time.perf_counter()
        self.timings["optimize"] += (t3 - t2) * 1e3

        self.local_map.cull()
        self.timings["cull"] += (time.perf_counter() - t3) * 1e3
        return kf


def run_sequence(frames, intrinsics: CameraIntrinsics, cfg: RunConfig | None = None,
                 deterministic: bool = True) -> RunResult:
    """Run the odometry over FrameData records; returns the estimated
    trajectory (camera-in-world), the final map and axes, and run stats."""
    cfg = cfg or RunConfig()
    mapping = _MappingState(cfg)
    lock = threading.Lock()
    jobs: queue.Queue = queue.Queue()
    worker_error = []

    def mapping_worker():
        while True:
            frame = jobs.get()
            if frame is None:
                return
            try:
                with lock:
                    mapping.process_keyframe(frame)
            except Exception as exc:  # surfaced at join
                worker_error.append(exc)
                return

    worker = None
    if not deterministic:
        worker = threading.Thread(target=mapping_worker, name="mapping", daemon=True)
        worker.start()

    def submit_keyframe(frame, sync=False):
        if deterministic:
            mapping.process_keyframe(frame)
        elif sync:  # bootstrap must land before the next frame tracks
            with lock:
                mapping.process_keyframe(frame)
        else:
            jobs.put(frame)

    motion = MotionModel()
    anchors = []   # per frame: (timestamp, keyframe id, pose relative to it)
    reports = []
    prev_frame = None
    lost_streak = 0
    lost_frames = 0
    frames_since_kf = 0
    track_ms = 0.0
    n_keyframes = 0
    last_kf_id = -1

    try:
        for idx, data in enumerate(frames):
            t0 = time.perf_counter()
            frame = Frame(data, intrinsics, idx)
            _fit_frame_lines(frame, cfg, idx)
            if cfg.structural_refinement:
                _refine_frame_lines(frame, cfg)

            make_keyframe = False
            if prev_frame is None:
                frame.pose_cw = Pose.identity()
                make_keyframe = True
                last_kf_pose_track = frame.pose_cw
            else:
                with lock:
                    snapshot = mapping.local_map.snapshot()
                    prev_shim = _PrevView(dict(prev_frame.point_matches),
                                          dict(prev_frame.line_matches))
                predicted = motion.predict(prev_frame.pose_cw)
                try:
                    if not prev_shim.tracked_count():
                        raise TrackingLostError("previous frame carries no matches",
                                                predicted_pose=predicted)
                    result = estimate_pose(frame, prev_shim, snapshot, predicted, cfg)
                    reports.append(result)
                    lost_streak = 0
                except TrackingLostError as exc:
                    lost_frames += 1
                    lost_streak += 1
                    log.warning("frame %d tracking lost (%s); using predicted pose",
                                idx, exc)
                    if lost_streak > cfg.max_lost_frames:
                        raise TrackingLostError(
                            f"tracking lost for {lost_streak} consecutive frames",
                            predicted_pose=exc.predicted_pose) from exc
                    frame.pose_cw = exc.predicted_pose
                    # recovery attempt: match against the whole map at the prediction
                    pm, lm = match_to_map(frame, snapshot, frame.pose_cw, cfg.matching, cfg)
                    frame.point_matches, frame.line_matches = pm, lm

                motion.update(prev_frame.pose_cw, frame.pose_cw)
                frames_since_kf += 1
                tracked = frame.tracked_count()
                creatable = frame.creatable_count()
                make_keyframe = tracked + creatable > 0 and keyframe_decision(
                    tracked, creatable, frames_since_kf, cfg)

            if make_keyframe:
                # keyframe ids are assigned in submission order
                anchors.append((frame.timestamp, n_keyframes, Pose.identity()))
                last_kf_id = n_keyframes
                last_kf_pose_track = frame.pose_cw
            else:
                anchors.append((frame.timestamp, last_kf_id,
                                frame.pose_cw.compose(last_kf_pose_track.inverse())))
            prev_frame = frame
            track_ms += (time.perf_counter() - t0) * 1e3
            if make_keyframe:
                submit_keyframe(frame, sync=n_keyframes == 0)
                n_keyframes += 1
                frames_since_kf = 0
    finally:
        if worker is not None:
            jobs.put(None)
            worker.join()
    if worker_error:
        raise worker_error[0]

    # final trajectory: each frame's keyframe-relative pose composed onto the
    # refined keyframe pose, so local optimization reaches the output
    trajectory = []
    for timestamp, kf_id, rel in anchors:
        pose_cw = rel.compose(mapping.local_map.keyframe_pose(kf_id))
        trajectory.append((timestamp, pose_cw.inverse()))

    timings = {"tracking": track_ms, **mapping.timings}
    return RunResult(trajectory=trajectory, local_map=mapping.local_map, axes=mapping.axes,
                     timings_ms=timings, n_keyframes=n_keyframes, lost_frames=lost_frames,
                     reports=reports)
