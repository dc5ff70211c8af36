"""Keyframe/landmark bookkeeping, covisibility, structural and Manhattan
association, local map optimization and culling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .errors import NumericalError
from .geometry import LineSegment3D, Pose, orientation_discrepancy
from .line_init import normalize_response
from .residuals import (LineAxisAlignmentResidual, LineDepthAnchorResidual,
                        LineReprojectionResidual, LineSlidePriorResidual,
                        ParallelPairResidual, PerpendicularPairResidual,
                        PointDepthResidual, PointReprojectionResidual)
from .solver import (HuberLoss, LineEndpointsBlock, PointBlock, PoseBlock,
                     Problem, SolverOptions, solve)
from .tracking import Frame, MapSnapshot

log = logging.getLogger("structvo.mapping")


@dataclass
class MapPoint:
    id: int
    position: np.ndarray                       # world
    external_id: int | None = None
    observations: dict = field(default_factory=dict)  # keyframe id -> obs index
    created_at: int = 0                        # keyframe id at creation

    @property
    def n_observers(self):
        return len(self.observations)


@dataclass
class MapLine:
    id: int
    start: np.ndarray                          # world
    end: np.ndarray
    external_id: int | None = None
    observations: dict = field(default_factory=dict)
    created_at: int = 0
    axis: int | None = None                    # associated Manhattan axis
    anchor_depths: tuple | None = None         # fitted endpoint depths at creation

    @property
    def n_observers(self):
        return len(self.observations)

    def direction(self):
        d = self.end - self.start
        return d / np.linalg.norm(d)


@dataclass
class Keyframe:
    id: int
    frame: Frame
    pose_cw: Pose
    point_matches: dict = field(default_factory=dict)  # obs index -> point id
    line_matches: dict = field(default_factory=dict)   # obs index -> line id
    perp_pairs: list = field(default_factory=list)     # (line id, line id)
    par_pairs: list = field(default_factory=list)


class LocalMap:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.keyframes: dict[int, Keyframe] = {}
        self.points: dict[int, MapPoint] = {}
        self.lines: dict[int, MapLine] = {}
        self._next_point = 0
        self._next_line = 0
        self._next_keyframe = 0
        self.point_by_external: dict[int, int] = {}
        self.line_by_external: dict[int, int] = {}
        self.retired_poses: dict[int, Pose] = {}  # culled keyframes' final poses

    def keyframe_pose(self, kf_id: int) -> Pose:
        if kf_id in self.keyframes:
            return self.keyframes[kf_id].pose_cw
        return self.retired_poses[kf_id]

    # -- snapshots -----------------------------------------------------------

    def snapshot(self) -> MapSnapshot:
        return MapSnapshot(
            points={i: p.position.copy() for i, p in sorted(self.points.items())},
            lines={i: (l.start.copy(), l.end.copy()) for i, l in sorted(self.lines.items())},
            point_by_external=dict(self.point_by_external),
            line_by_external=dict(self.line_by_external))

    # -- covisibility --------------------------------------------------------

    def shared_count(self, ka: Keyframe, kb: Keyframe) -> int:
        pa = set(ka.point_matches.values()) & set(kb.point_matches.values())
        la = set(ka.line_matches.values()) & set(kb.line_matches.values())
        return len(pa) + len(la)

    def covisible(self, kf_id: int):
        """Keyframes sharing at least covisibility_min_shared landmarks."""
        me = self.keyframes[kf_id]
        out = []
        for other_id in sorted(self.keyframes):
            if other_id == kf_id:
                continue
            if self.shared_count(me, self.keyframes[other_id]) >= self.cfg.covisibility_min_shared:
                out.append(other_id)
        return out

    # -- landmark creation / fusion -------------------------------------------

    def _fuse_point(self, position):
        for pid in sorted(self.points):
            if np.linalg.norm(self.points[pid].position - position) < self.cfg.fuse_point_distance:
                return pid
        return None

    def _fuse_line(self, start, end):
        gate = np.cos(np.radians(self.cfg.fuse_line_angle_deg))
        d = end - start
        d = d / np.linalg.norm(d)
        for lid in sorted(self.lines):
            line = self.lines[lid]
            if orientation_discrepancy(d, line.direction()) <= gate:
                continue
            if (np.linalg.norm(line.start - start) < self.cfg.fuse_line_distance and
                    np.linalg.norm(line.end - end) < self.cfg.fuse_line_distance):
                return lid
            if (np.linalg.norm(line.start - end) < self.cfg.fuse_line_distance and
                    np.linalg.norm(line.end - start) < self.cfg.fuse_line_distance):
                return lid
        return None

    def insert_keyframe(self, frame: Frame) -> Keyframe:
        """Promote a frame: existing matches become observations, unmatched
        observations with 3D estimates become new landmarks (fused when a
        close duplicate already exists)."""
        kf = Keyframe(id=self._next_keyframe, frame=frame, pose_cw=frame.pose_cw,
                      point_matches=dict(frame.point_matches),
                      line_matches=dict(frame.line_matches))
        self._next_keyframe += 1
        self.keyframes[kf.id] = kf
        pose_wc = frame.pose_cw.inverse()

        for i, lm_id in sorted(kf.point_matches.items()):
            self.points[lm_id].observations[kf.id] = i
        for i, lm_id in sorted(kf.line_matches.items()):
            self.lines[lm_id].observations[kf.id] = i

        for i, obs in enumerate(frame.points):
            if i in kf.point_matches or obs.depth <= 0:
                continue
            pw = pose_wc.transform(np.array(
                [(obs.u - frame.intrinsics.cx) * obs.depth / frame.intrinsics.fx,
                 (obs.v - frame.intrinsics.cy) * obs.depth / frame.intrinsics.fy,
                 obs.depth]))
            fused = self._fuse_point(pw)
            if fused is not None:
                if kf.id not in self.points[fused].observations:
                    self.points[fused].observations[kf.id] = i
                    kf.point_matches[i] = fused
                continue
            pid = self._next_point
            self._next_point += 1
            self.points[pid] = MapPoint(id=pid, position=pw, external_id=obs.landmark_id,
                                        observations={kf.id: i}, created_at=kf.id)
            kf.point_matches[i] = pid
            if obs.landmark_id is not None and obs.landmark_id not in self.point_by_external:
                self.point_by_external[obs.landmark_id] = pid

        for i, seg in enumerate(frame.line_segments):
            if i in kf.line_matches or seg is None:
                continue
            sw = pose_wc.transform(seg.start)
            ew = pose_wc.transform(seg.end)
            fused = self._fuse_line(sw, ew)
            if fused is not None:
                if kf.id not in self.lines[fused].observations:
                    self.lines[fused].observations[kf.id] = i
                    kf.line_matches[i] = fused
                continue
            lid = self._next_line
            self._next_line += 1
            obs = frame.lines[i]
            self.lines[lid] = MapLine(id=lid, start=sw, end=ew, external_id=obs.landmark_id,
                                      observations={kf.id: i}, created_at=kf.id,
                                      anchor_depths=(float(seg.start[2]), float(seg.end[2])))
            kf.line_matches[i] = lid
            if obs.landmark_id is not None and obs.landmark_id not in self.line_by_external:
                self.line_by_external[obs.landmark_id] = lid
        return kf

    # -- structural / Manhattan association ------------------------------------

    def associate_structural(self, kf: Keyframe):
        """Recompute the keyframe's structural pair sets over all map lines it
        observes, gated in the world frame."""
        ids = sorted(set(kf.line_matches.values()))
        par_gate = np.cos(np.radians(self.cfg.theta_par_deg))
        perp_gate = np.sin(np.radians(self.cfg.theta_perp_deg))
        kf.perp_pairs = []
        kf.par_pairs = []
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                d = orientation_discrepancy(self.lines[ids[a]].direction(),
                                            self.lines[ids[b]].direction())
                if d > par_gate:
                    kf.par_pairs.append((ids[a], ids[b]))
                elif d < perp_gate:
                    kf.perp_pairs.append((ids[a], ids[b]))

    def regate_structural(self):
        for kf_id in sorted(self.keyframes):
            self.associate_structural(self.keyframes[kf_id])

    def associate_manhattan(self, line: MapLine, axes) -> int | None:
        """Best-aligned axis if inside the gate; ties break to the lowest index."""
        if axes is None or not axes.valid:
            return None
        gate = np.cos(np.radians(self.cfg.theta_ma_deg))
        d = line.direction()
        scores = [orientation_discrepancy(d, axes.axes[:, k]) for k in range(3)]
        best = int(np.argmax(scores))
        if scores[best] > gate:
            return best
        return None

    def reassociate_all_lines(self, axes):
        for lid in sorted(self.lines):
            self.lines[lid].axis = self.associate_manhattan(self.lines[lid], axes)

    # -- local optimization -----------------------------------------------------

    def build_local_problem(self, kf_id: int, axes=None):
        """Problem for the local optimization around keyframe kf_id.

        Free: covisible keyframe poses (the anchor below stays fixed) and all
        landmarks they observe. Fixed: non-connected observers of those
        landmarks; when there are none, the oldest covisible pose anchors the
        gauge instead.
        """
        cfg = self.cfg
        core = sorted(set(self.covisible(kf_id)) | {kf_id})
        point_ids = sorted({lm for k in core
                            for lm in self.keyframes[k].point_matches.values()})
        line_ids = sorted({lm for k in core
                           for lm in self.keyframes[k].line_matches.values()})

        fixed = sorted({k for pid in point_ids for k in self.points[pid].observations
                        if k not in core} |
                       {k for lid in line_ids for k in self.lines[lid].observations
                        if k not in core})

        pose_blocks = {}
        for k in core:
            pose_blocks[k] = PoseBlock(self.keyframes[k].pose_cw)
        for k in fixed:
            pose_blocks[k] = PoseBlock(self.keyframes[k].pose_cw, fixed=True)
        if not fixed:
            pose_blocks[core[0]].fixed = True  # oldest covisible anchors the gauge

        point_blocks = {pid: PointBlock(self.points[pid].position) for pid in point_ids}
        line_blocks = {lid: LineEndpointsBlock(self.lines[lid].start, self.lines[lid].end)
                       for lid in line_ids}

        problem = Problem()
        for lid in line_ids:
            problem.add_residual(LineSlidePriorResidual(
                line_blocks[lid], cfg.line_slide_prior_weight))
        px_loss = HuberLoss(cfg.huber_delta_px) if cfg.robust_loss else None
        ang_loss = HuberLoss(cfg.huber_delta_angular) if cfg.robust_loss else None
        stats = {"reprojection": 0, "structural": 0, "manhattan": 0, "depth": 0}

        for k in core + fixed:
            kf = self.keyframes[k]
            intr = kf.frame.intrinsics
            for i, pid in sorted(kf.point_matches.items()):
                if pid not in point_blocks:
                    continue
                if kf.pose_cw.transform(self.points[pid].position)[2] <= 1e-6:
                    continue  # behind the camera: excluded, like the pose problems
                obs = kf.frame.points[i]
                omega = 1.0 / normalize_response(obs.response, cfg.response_floor)
                problem.add_residual(PointReprojectionResidual(
                    pose_blocks[k], point_blocks[pid], obs.pixel, omega, intr), px_loss)
                stats["reprojection"] += 1
                if cfg.depth_anchor_weight > 0 and obs.depth > 0:
                    sigma = max(cfg.depth_noise_a + cfg.depth_noise_b * obs.depth**2,
                                1e-4) / cfg.depth_anchor_weight
                    problem.add_residual(PointDepthResidual(
                        pose_blocks[k], point_blocks[pid], obs.depth, sigma), px_loss)
                    stats["depth"] += 1
            for i, lid in sorted(kf.line_matches.items()):
                if lid not in line_blocks:
                    continue
                line = self.lines[lid]
                if (kf.pose_cw.transform(line.start)[2] <= 1e-6 or
                        kf.pose_cw.transform(line.end)[2] <= 1e-6):
                    continue
                obs = kf.frame.lines[i]
                omega = 1.0 / normalize_response(obs.response, cfg.response_floor)
                problem.add_residual(LineReprojectionResidual(
                    pose_blocks[k], line_blocks[lid], obs.coefficients, omega, intr), px_loss)
                stats["reprojection"] += 1
                if (cfg.depth_anchor_weight > 0 and line.created_at == k
                        and line.anchor_depths is not None):
                    z = 0.5 * (line.anchor_depths[0] + line.anchor_depths[1])
                    sigma = max(cfg.depth_noise_a + cfg.depth_noise_b * z * z,
                                1e-4) / cfg.depth_anchor_weight
                    problem.add_residual(LineDepthAnchorResidual(
                        pose_blocks[k], line_blocks[lid], line.anchor_depths[0],
                        line.anchor_depths[1], sigma), px_loss)
                    stats["depth"] += 1

        if cfg.structural_refinement:
            for k in core:
                kf = self.keyframes[k]
                obs_of = {lid: i for i, lid in kf.line_matches.items()}
                for m, n in kf.perp_pairs + kf.par_pairs:
                    if m not in line_blocks or n not in line_blocks:
                        continue
                    omega = 1.0 / normalize_response(
                        kf.frame.lines[obs_of[n]].response, cfg.response_floor)
                    res_cls = (PerpendicularPairResidual if (m, n) in kf.perp_pairs
                               else ParallelPairResidual)
                    problem.add_residual(res_cls(line_blocks[m], line_blocks[n], omega), ang_loss)
                    stats["structural"] += 1

        if cfg.manhattan and axes is not None and axes.valid:
            for lid in line_ids:
                axis = self.lines[lid].axis
                if axis is None:
                    continue
                problem.add_residual(LineAxisAlignmentResidual(
                    line_blocks[lid], axes.axes[:, axis], 1.0 / cfg.ma_weight), ang_loss)
                stats["manhattan"] += 1

        return problem, pose_blocks, point_blocks, line_blocks, core, fixed, stats

    def optimize_local(self, kf_id: int, axes=None):
        """Run the local optimization and apply the result atomically."""
        built = self.build_local_problem(kf_id, axes)
        problem, pose_blocks, point_blocks, line_blocks, core, fixed, stats = built
        try:
            report = solve(problem, SolverOptions.for_map(self.cfg))
        except NumericalError as exc:
            log.warning("local optimization discarded: %s", exc)
            return None
        if not report.success:
            log.warning("local optimization diverged; map untouched")
            return None
        for k in core:
            self.keyframes[k].pose_cw = pose_blocks[k].pose
        for pid, blk in point_blocks.items():
            self.points[pid].position = blk.value.copy()
        for lid, blk in line_blocks.items():
            if np.linalg.norm(blk.end - blk.start) > 1e-6:
                self.lines[lid].start = blk.start.copy()
                self.lines[lid].end = blk.end.copy()
        if self.cfg.structural_refinement:
            self.regate_structural()
        return report

    # -- culling -----------------------------------------------------------------

    def cull(self):
        """Drop under-observed landmarks (after a grace period) and redundant
        keyframes; keep pair sets and observations consistent."""
        if not self.keyframes:
            return
        latest = max(self.keyframes)
        for pid in sorted(self.points):
            p = self.points[pid]
            if p.n_observers < 2 and latest - p.created_at > self.cfg.cull_grace_keyframes:
                self._remove_point(pid)
        for lid in sorted(self.lines):
            l = self.lines[lid]
            if l.n_observers < 2 and latest - l.created_at > self.cfg.cull_grace_keyframes:
                self._remove_line(lid)

        for kf_id in sorted(self.keyframes):
            if kf_id == latest:
                continue  # the newest keyframe anchors the next optimization
            kf = self.keyframes[kf_id]
            lm_ids = list(kf.point_matches.values()) + list(kf.line_matches.values())
            if not lm_ids:
                self._remove_keyframe(kf_id)
                continue
            redundant = 0
            for pid in kf.point_matches.values():
                others = sum(1 for k in self.points[pid].observations if k != kf_id)
                if others >= 3:
                    redundant += 1
            for lid in kf.line_matches.values():
                others = sum(1 for k in self.lines[lid].observations if k != kf_id)
                if others >= 3:
                    redundant += 1
            if redundant / len(lm_ids) >= self.cfg.cull_redundancy:
                self._remove_keyframe(kf_id)

    def _remove_point(self, pid):
        p = self.points.pop(pid)
        for k, i in p.observations.items():
            if k in self.keyframes:
                self.keyframes[k].point_matches.pop(i, None)
        if p.external_id is not None and self.point_by_external.get(p.external_id) == pid:
            del self.point_by_external[p.external_id]

    def _remove_line(self, lid):
        l = self.lines.pop(lid)
        for k, i in l.observations.items():
            if k in self.keyframes:
                kf = self.keyframes[k]
                kf.line_matches.pop(i, None)
                kf.perp_pairs = [pr for pr in kf.perp_pairs if lid not in pr]
                kf.par_pairs = [pr for pr in kf.par_pairs if lid not in pr]
        if l.external_id is not None and self.line_by_external.get(l.external_id) == lid:
            del self.line_by_external[l.external_id]

    def _remove_keyframe(self, kf_id):
        kf = self.keyframes.pop(kf_id)
        self.retired_poses[kf_id] = kf.pose_cw
        for pid in set(kf.point_matches.values()):
            if pid in self.points:
                self.points[pid].observations.pop(kf_id, None)
        for lid in set(kf.line_matches.values()):
            if lid in self.lines:
                self.lines[lid].observations.pop(kf_id, None)

    # -- audits / export -----------------------------------------------------------

    def audit(self):
        """Structural-pair and observation consistency; raises on violation."""
        for kf_id, kf in self.keyframes.items():
            observed = set(kf.line_matches.values())
            for m, n in kf.perp_pairs + kf.par_pairs:
                if m not in self.lines or n not in self.lines:
                    raise AssertionError(f"keyframe {kf_id} pair references a dead line")
                if m not in observed or n not in observed:
                    raise AssertionError(f"keyframe {kf_id} pair references a non-co-observed line")
        for pid, p in self.points.items():
            for k in p.observations:
                if k not in self.keyframes:
                    raise AssertionError(f"point {pid} observed by dead keyframe {k}")
        for lid, l in self.lines.items():
            for k in l.observations:
                if k not in self.keyframes:
                    raise AssertionError(f"line {lid} observed by dead keyframe {k}")
            if l.axis is not None and not 0 <= l.axis <= 2:
                raise AssertionError(f"line {lid} has invalid axis {l.axis}")

    def export_lines_csv(self, path):
        """Line landmarks with their axis labels (-1 when unassociated)."""
        with open(path, "w") as fh:
            fh.write("id,sx,sy,sz,ex,ey,ez,axis\n")
            for lid in sorted(self.lines):
                l = self.lines[lid]
                axis = -1 if l.axis is None else l.axis
                coords = list(l.start) + list(l.end)
                fh.write(",".join([str(lid)] + [repr(float(c)) for c in coords] + [str(axis)]) + "\n")
