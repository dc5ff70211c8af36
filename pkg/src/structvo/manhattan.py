"""Manhattan axes lifecycle: mean-shift initialization on the unit sphere,
validity gating, multi-view nonlinear refinement, SVD orthogonalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .errors import DegenerateAxesError
from .residuals import AxisRefinementResidual
from .solver import (HuberLoss, Problem, SolverOptions, UnitDirectionBlock, solve)

UNAVAILABLE = "unavailable"
COARSE = "coarse"
REFINED = "refined"


@dataclass
class ManhattanAxes:
    axes: np.ndarray          # 3x3, columns are the axis directions (world)
    support: tuple = (0, 0, 0)
    state: str = UNAVAILABLE

    @property
    def valid(self):
        return self.state != UNAVAILABLE

    @staticmethod
    def unavailable():
        return ManhattanAxes(axes=np.eye(3), support=(0, 0, 0), state=UNAVAILABLE)

    def angles_to(self, reference) -> np.ndarray:
        """Per-axis angular deviation (degrees) against a reference triad."""
        out = []
        for k in range(3):
            c = abs(float(self.axes[:, k] @ reference[:, k]))
            out.append(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
        return np.asarray(out)


def orthogonalize_svd(axes) -> np.ndarray:
    """Nearest rotation (Frobenius) to a near-orthonormal column triad."""
    M = np.asarray(axes, dtype=float).reshape(3, 3)
    U, S, Vt = np.linalg.svd(M)
    if S[-1] < 1e-9 * max(S[0], 1e-30):
        raise DegenerateAxesError("axis triad is rank-deficient")
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return R


def _mean_shift_axis(directions, axis, cfg: RunConfig):
    """Iterated kernel-weighted spherical mean within the axis cell."""
    u = axis / np.linalg.norm(axis)
    bandwidth = np.radians(cfg.ma_bandwidth_deg)
    cell = np.cos(np.radians(cfg.ma_cell_deg))
    tol = np.radians(cfg.ma_converge_deg)
    for _ in range(cfg.ma_max_iterations):
        signs = np.where(directions @ u < 0.0, -1.0, 1.0)
        folded = directions * signs[:, None]
        cos = folded @ u
        sel = cos > cell
        if not np.any(sel):
            return u, 0
        theta = np.arccos(np.clip(cos[sel], -1.0, 1.0))
        w = np.exp(-0.5 * (theta / bandwidth) ** 2)
        m = (w[:, None] * folded[sel]).sum(axis=0)
        norm = np.linalg.norm(m)
        if norm < 1e-12:
            return u, 0
        new_u = m / norm
        delta = np.arccos(np.clip(abs(float(new_u @ u)), -1.0, 1.0))
        u = new_u
        if delta < tol:
            break
    return u, int(sel.sum())


def _support_counts(directions, axes, angle_deg):
    gate = np.cos(np.radians(angle_deg))
    counts = []
    for k in range(3):
        cos = np.abs(directions @ axes[:, k])
        counts.append(int((cos > gate).sum()))
    return tuple(counts)


def _greedy_seed(directions, neighbor_deg=10.0):
    """Data-driven triad seed: densest direction mode, then the densest mode
    near-orthogonal to it. Needed because the map's world frame is anchored to
    the first camera, which can sit far from the scene's dominant directions."""
    gate = np.cos(np.radians(neighbor_deg))
    density = np.abs(directions @ directions.T) > gate
    counts = density.sum(axis=1)
    first = directions[int(np.argmax(counts))]
    ortho = np.abs(directions @ first) < 0.3
    if not np.any(ortho):
        return None
    counts2 = np.where(ortho, counts, -1)
    second = directions[int(np.argmax(counts2))]
    second = second - (second @ first) * first
    second /= np.linalg.norm(second)
    third = np.cross(first, second)
    return np.column_stack([first, second, third])


def coarse_estimate(directions, initial_rotation, cfg: RunConfig | None = None) -> ManhattanAxes:
    """Mean-shift axes from line directions and surface normals.

    Valid only when, after orthogonalization, at least two axes keep enough
    supporting directions; otherwise the unavailable sentinel is returned and
    the pipeline continues without Manhattan constraints.
    """
    cfg = cfg or RunConfig()
    directions = np.asarray(directions, dtype=float).reshape(-1, 3)
    if directions.shape[0] < cfg.ma_min_support:
        return ManhattanAxes.unavailable()
    norms = np.linalg.norm(directions, axis=1)
    directions = directions[norms > 1e-9] / norms[norms > 1e-9, None]

    seeds = [np.asarray(initial_rotation, dtype=float).reshape(3, 3)]
    greedy = _greedy_seed(directions)
    if greedy is not None:
        seeds.append(greedy)

    best = ManhattanAxes.unavailable()
    best_support = -1
    for seed in seeds:
        converged = np.empty((3, 3))
        for k in range(3):
            converged[:, k], _ = _mean_shift_axis(directions, seed[:, k], cfg)
        try:
            axes = orthogonalize_svd(converged)
        except DegenerateAxesError:
            continue
        support = _support_counts(directions, axes, cfg.ma_support_angle_deg)
        populated = sum(1 for s in support if s >= cfg.ma_axis_min_support)
        if populated >= 2 and sum(support) > best_support:
            best = ManhattanAxes(axes=axes, support=support, state=COARSE)
            best_support = sum(support)
    return best


def refine_axes(axes: ManhattanAxes, observations, cfg: RunConfig | None = None):
    """Multi-view refinement of a coarse triad.

    `observations` is a list of (world line direction, associated axis index)
    pairs, one entry per keyframe observation of an associated line. Line
    directions are constants; only the three axis blocks move. The refined
    triad is SVD-orthogonalized before being returned.

    Returns (ManhattanAxes, SolverReport | None). When preconditions fail the
    coarse axes are returned untouched (refinement deferred).
    """
    cfg = cfg or RunConfig()
    if not axes.valid:
        return axes, None
    per_axis = [0, 0, 0]
    for _, k in observations:
        per_axis[k] += 1
    if min(per_axis) < cfg.ma_refine_min_lines:
        return axes, None

    blocks = [UnitDirectionBlock(axes.axes[:, k]) for k in range(3)]
    problem = Problem()
    loss = HuberLoss(cfg.huber_delta_angular) if cfg.robust_loss else None
    residuals = []
    for direction, k in observations:
        res = AxisRefinementResidual(blocks, k, direction, omega=1.0 / cfg.ma_weight)
        residuals.append(res)
        problem.add_residual(res, loss)

    initial_cost = problem.evaluate_cost(strict=True)
    report = solve(problem, SolverOptions.for_map(cfg))
    refined = orthogonalize_svd(np.column_stack([b.value for b in blocks]))

    # evaluate the robust cost at the projected point; never accept an increase
    for k in range(3):
        blocks[k].restore((refined[:, k], None))
    final_cost = problem.evaluate_cost(strict=True)
    assert final_cost <= initial_cost + 1e-9, \
        "axes refinement increased the robust alignment cost"

    # axis labels must be stable: refinement stays within the coarse cells
    stable = ManhattanAxes(axes=refined, support=axes.support, state=REFINED)
    assert np.all(stable.angles_to(axes.axes) < cfg.ma_cell_deg), \
        "axes refinement swapped axis labels"
    return stable, report


def deduped_normals(normals, pose_wc, dedup_deg=0.2):
    """World-frame surface normals with near-identical ones collapsed.

    Grid cells sampling the same surface repeat its normal; one plane should
    count as one structure.
    """
    if normals is None:
        return []
    R = pose_wc.rotation
    gate = np.cos(np.radians(dedup_deg))
    reps = []
    for row in np.asarray(normals).reshape(-1, 5):
        n = R @ row[2:5]
        if not reps or all(abs(float(n @ r)) < gate for r in reps):
            reps.append(n)
    return reps


def directions_for_estimation(frame, pose_wc) -> np.ndarray:
    """World-frame direction evidence from one frame: fitted line directions
    plus deduplicated grid surface normals. Parallel lines are distinct
    structures and all count."""
    dirs = []
    R = pose_wc.rotation
    for seg in frame.line_segments:
        if seg is not None:
            dirs.append(R @ seg.direction)
    dirs.extend(deduped_normals(frame.normals, pose_wc))
    return np.asarray(dirs, dtype=float).reshape(-1, 3)
