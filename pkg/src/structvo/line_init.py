"""3D line endpoint estimation from depth samples, plus structural refinement.

Two steps: (1) RANSAC + orthogonal least squares over backprojected depth
samples gives each segment robust camera-frame endpoints; (2) segments that
participate in a parallel/perpendicular pair are jointly refined so their
directions meet the structural relations, with a weak prior pinning the
endpoints (the pure angular cost is blind to translation/sliding).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .geometry import LineObservation, LineSegment3D, CameraIntrinsics, orientation_discrepancy
from .residuals import (EndpointPriorResidual, ParallelPairResidual,
                        PerpendicularPairResidual)
from .solver import HuberLoss, LineEndpointsBlock, Problem, SolverOptions, solve

NO_DEPTH = "no_depth"
UNRELIABLE = "unreliable_depth"
OK = "ok"


@dataclass
class StructuralPairSets:
    """Unordered, unique index pairs; a pair never sits in both sets."""

    perpendicular: list = field(default_factory=list)
    parallel: list = field(default_factory=list)

    def __len__(self):
        return len(self.perpendicular) + len(self.parallel)

    def members(self):
        out = set()
        for m, n in self.perpendicular + self.parallel:
            out.add(m)
            out.add(n)
        return out


@dataclass
class LineFitResult:
    segment: LineSegment3D | None
    status: str
    inlier_ratio: float = 0.0
    rms: float = 0.0


def perp_error(dir_m, dir_n, omega=1.0):
    """Orientation discrepancy scaled by the inverse response weight."""
    return orientation_discrepancy(dir_m, dir_n) / omega


def par_error(dir_m, dir_n, omega=1.0):
    """sqrt(1 - discrepancy^2) scaled by the inverse response weight."""
    d = orientation_discrepancy(dir_m, dir_n)
    return float(np.sqrt(max(1.0 - d * d, 0.0))) / omega


def normalize_response(response, floor=0.1):
    """Map a detector response into (floor, 1]; zero weights are not allowed."""
    return float(min(max(response, floor), 1.0))


def _point_line_distances(points, origin, direction):
    rel = points - origin
    proj = rel @ direction
    return np.linalg.norm(rel - np.outer(proj, direction), axis=1), proj


def robust_fit_line_3d(obs: LineObservation, intrinsics: CameraIntrinsics,
                       cfg: RunConfig | None = None, rng=None) -> LineFitResult:
    """RANSAC fit of a camera-frame 3D segment from the observation's samples.

    Endpoints are the projections of the extreme inlier samples onto the
    refit line, ordered to follow the 2D sample order.
    """
    cfg = cfg or RunConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)

    valid = obs.sample_depth > 0
    if int(valid.sum()) < cfg.line_min_samples:
        return LineFitResult(None, NO_DEPTH)

    px = obs.sample_px[valid]
    depth = obs.sample_depth[valid]
    pts = np.column_stack([
        (px[:, 0] - intrinsics.cx) * depth / intrinsics.fx,
        (px[:, 1] - intrinsics.cy) * depth / intrinsics.fy,
        depth,
    ])
    n = pts.shape[0]
    tol = np.maximum(cfg.inlier_tol_floor, 2.0 * (cfg.depth_noise_a + cfg.depth_noise_b * depth**2))

    best_mask = None
    best_count = 0
    for _ in range(cfg.ransac_iterations):
        i, j = rng.choice(n, size=2, replace=False)
        d = pts[j] - pts[i]
        norm = np.linalg.norm(d)
        if norm < 1e-9:
            continue
        dist, _ = _point_line_distances(pts, pts[i], d / norm)
        mask = dist < tol
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask

    if best_mask is None or best_count < 2:
        return LineFitResult(None, UNRELIABLE)

    # orthogonal least squares on the consensus set, then one re-gate + refit
    for _ in range(2):
        inliers = pts[best_mask]
        centroid = inliers.mean(axis=0)
        _, _, vt = np.linalg.svd(inliers - centroid, full_matrices=False)
        direction = vt[0]
        dist, _ = _point_line_distances(pts, centroid, direction)
        new_mask = dist < tol
        if np.array_equal(new_mask, best_mask):
            break
        best_mask = new_mask
        if int(best_mask.sum()) < 2:
            return LineFitResult(None, UNRELIABLE)

    ratio = float(best_mask.sum()) / n
    if ratio < cfg.line_min_inlier_ratio:
        return LineFitResult(None, UNRELIABLE, inlier_ratio=ratio)

    inliers = pts[best_mask]
    centroid = inliers.mean(axis=0)
    _, _, vt = np.linalg.svd(inliers - centroid, full_matrices=False)
    direction = vt[0]
    dist, proj = _point_line_distances(inliers, centroid, direction)
    rms = float(np.sqrt(np.mean(dist**2)))

    # extreme inliers along the line, following the sample order so that
    # `start` corresponds to the s-end of the 2D segment
    order = np.argsort(proj)
    lo, hi = order[0], order[-1]
    idx = np.flatnonzero(best_mask)
    if idx[lo] > idx[hi]:
        lo, hi = hi, lo
    start = centroid + proj[lo] * direction
    end = centroid + proj[hi] * direction
    if np.linalg.norm(end - start) <= 1e-6:
        return LineFitResult(None, UNRELIABLE, inlier_ratio=ratio)
    return LineFitResult(LineSegment3D(start, end, "camera"), OK, inlier_ratio=ratio, rms=rms)


def backproject_endpoints(obs: LineObservation, intrinsics: CameraIntrinsics) -> LineFitResult:
    """Naive endpoint-depth lifting (robust fitting disabled)."""
    if obs.sample_depth.shape[0] < 2:
        return LineFitResult(None, NO_DEPTH)
    d0 = obs.sample_depth[0]
    d1 = obs.sample_depth[-1]
    if d0 <= 0 or d1 <= 0:
        return LineFitResult(None, NO_DEPTH)
    p0, p1 = obs.sample_px[0], obs.sample_px[-1]
    start = np.array([(p0[0] - intrinsics.cx) * d0 / intrinsics.fx,
                      (p0[1] - intrinsics.cy) * d0 / intrinsics.fy, d0])
    end = np.array([(p1[0] - intrinsics.cx) * d1 / intrinsics.fx,
                    (p1[1] - intrinsics.cy) * d1 / intrinsics.fy, d1])
    if np.linalg.norm(end - start) <= 1e-6:
        return LineFitResult(None, UNRELIABLE)
    return LineFitResult(LineSegment3D(start, end, "camera"), OK)


def pair_structural_candidates(directions, responses=None, theta_par_deg=5.0,
                               theta_perp_deg=5.0) -> StructuralPairSets:
    """Gate every direction pair into the parallel / perpendicular sets.

    `directions` may be unit 3-vectors or LineSegment3D objects. Responses
    are accepted for signature compatibility; gating is purely angular.
    """
    dirs = [d.direction if isinstance(d, LineSegment3D) else np.asarray(d, dtype=float)
            for d in directions]
    par_gate = np.cos(np.radians(theta_par_deg))
    perp_gate = np.sin(np.radians(theta_perp_deg))
    pairs = StructuralPairSets()
    for m in range(len(dirs)):
        for n in range(m + 1, len(dirs)):
            d = orientation_discrepancy(dirs[m], dirs[n])
            if d > par_gate:
                pairs.parallel.append((m, n))
            elif d < perp_gate:
                pairs.perpendicular.append((m, n))
    return pairs


def structural_cost(segments, pairs: StructuralPairSets, omegas, delta=0.05):
    """Robust structural cost of the current segment directions."""
    loss = HuberLoss(delta)
    total = 0.0
    for m, n in pairs.perpendicular:
        total += loss.cost(perp_error(segments[m].direction, segments[n].direction, omegas[n]))
    for m, n in pairs.parallel:
        total += loss.cost(par_error(segments[m].direction, segments[n].direction, omegas[n]))
    return total


def refine_endpoints_structural(segments, pairs: StructuralPairSets, responses=None,
                                fit_rms=None, cfg: RunConfig | None = None):
    """Jointly refine the endpoints of all pair-member segments.

    Returns (refined segments, report dict). Lines without a structural
    association are returned untouched. On solver failure the originals are
    returned with report["warning"] set.
    """
    cfg = cfg or RunConfig()
    segments = list(segments)
    if len(pairs) == 0:
        return segments, {"refined": False, "reason": "no structural pairs"}

    omegas = [normalize_response(r, cfg.response_floor) for r in
              (responses if responses is not None else [1.0] * len(segments))]
    rms = list(fit_rms) if fit_rms is not None else [0.0] * len(segments)

    members = sorted(pairs.members())
    blocks = {}
    for i in members:
        blocks[i] = LineEndpointsBlock(segments[i].start, segments[i].end)

    problem = Problem()
    loss = HuberLoss(cfg.huber_delta_angular) if cfg.robust_loss else None
    pair_residuals = []
    for m, n in pairs.perpendicular:
        res = PerpendicularPairResidual(blocks[m], blocks[n], omegas[n])
        pair_residuals.append(res)
        problem.add_residual(res, loss)
    for m, n in pairs.parallel:
        res = ParallelPairResidual(blocks[m], blocks[n], omegas[n])
        pair_residuals.append(res)
        problem.add_residual(res, loss)

    initial_structural = problem.evaluate_cost(strict=True)

    # gauge-fixing prior: budgeted at a fraction of the initial structural
    # cost when every endpoint sits at its trust radius
    weight = np.sqrt(cfg.endpoint_prior_fraction * max(initial_structural, 0.0)
                     / (6.0 * len(members)))
    weight = max(weight, 1e-6)
    for i in members:
        sigma = max(3.0 * rms[i], cfg.endpoint_prior_min_sigma)
        problem.add_residual(EndpointPriorResidual(blocks[i], weight, sigma))

    report = solve(problem, SolverOptions.for_map(cfg))
    final_structural = sum(
        HuberLoss(cfg.huber_delta_angular).cost(float(np.linalg.norm(res.evaluate())))
        for res in pair_residuals)

    if not report.success or final_structural > initial_structural + 1e-12:
        return segments, {"refined": False, "warning": "solver failure", "report": report}

    out = list(segments)
    for i in members:
        blk = blocks[i]
        try:
            out[i] = LineSegment3D(blk.start.copy(), blk.end.copy(), segments[i].frame)
        except Exception:
            pass  # collapsed segment: keep the unrefined original
    return out, {
        "refined": True,
        "initial_structural_cost": initial_structural,
        "final_structural_cost": final_structural,
        "report": report,
    }
