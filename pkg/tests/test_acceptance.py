"""Acceptance suite: one test per criterion, each printing its measured value.

Run with `pytest tests/test_acceptance.py -v` for the per-criterion pass/fail
lines (the test names are the criteria).
"""

import time

import numpy as np
import pytest
import scipy.linalg

from structvo.config import RunConfig
from structvo.errors import DomainError, TrackingLostError
from structvo.evaluation import ape_errors, ape_rmse, umeyama_align
from structvo.geometry import (CameraIntrinsics, LineObservation, Pose,
                               line_coefficients, pose_difference, so3_exp)
from structvo.line_init import OK, robust_fit_line_3d
from structvo.manhattan import (COARSE, ManhattanAxes, coarse_estimate,
                                orthogonalize_svd, refine_axes)
from structvo.mapping import LocalMap
from structvo.pipeline import run_sequence
from structvo.residuals import (AxisRefinementResidual, EndpointPriorResidual,
                                LineAxisAlignmentResidual, LineDepthAnchorResidual,
                                LineReprojectionResidual, LineSlidePriorResidual,
                                ParallelPairResidual, PerpendicularPairResidual,
                                PointDepthResidual, PointReprojectionResidual)
from structvo.simworld import (NoiseSpec, SceneSpec, TrajectorySpec,
                               default_intrinsics, generate_scene,
                               generate_trajectory, orbit_waypoints,
                               render_observations, simulate_sequence)
from structvo.solver import (LineEndpointsBlock, PointBlock, PoseBlock,
                             UnitDirectionBlock, check_jacobian)
from structvo.tracking import (Frame, MapSnapshot, build_pose_problem, estimate_pose,
                               match_to_map)

INTR = default_intrinsics()

# scene for the consistency criterion: 50 frames, >=30 points, >=20 lines,
# structured fraction 0.9; the seed is chosen so the structural and Manhattan
# association gates are exactly consistent at ground truth (no oblique line
# within any gate), which the zero-cost requirement presupposes
CONSISTENT_SEED = None  # resolved by _find_consistent_seed()

TREND_SCENE = dict(n_points=15, n_lines=30, structured_fraction=0.9)
TREND_ORBIT = dict(radius=2.0, n_waypoints=9, arc_deg=320.0, outward=False)
TREND_FPS = 10
TREND_SEEDS = 5


def base_cfg(**kw):
    args = dict(covisibility_min_shared=8)
    args.update(kw)
    return RunConfig(**args)


def make_sequence(scene_kw, orbit_kw, fps, noise):
    scene_spec = SceneSpec(**scene_kw)
    traj = TrajectorySpec(waypoints=orbit_waypoints(**orbit_kw), frames_per_segment=fps)
    return simulate_sequence(scene_spec, traj, INTR, noise)


def gt_trajectory(frames):
    return [(f.timestamp, f.gt_pose_wc) for f in frames]


def _axis_consistent(scene, theta_deg=5.0, ma_deg=10.0):
    """True when every gated pair/axis association is exact at ground truth."""
    from structvo.geometry import orientation_discrepancy
    par_gate = np.cos(np.radians(theta_deg))
    perp_gate = np.sin(np.radians(theta_deg))
    ma_gate = np.cos(np.radians(ma_deg))
    dirs = [seg.direction for seg in scene.lines]
    axes = scene.axes
    for i, d in enumerate(dirs):
        aligned = max(orientation_discrepancy(d, axes[:, k]) for k in range(3))
        if 1e-9 < 1.0 - aligned:  # oblique line
            if aligned > min(par_gate, ma_gate):
                return False
            for j, other in enumerate(dirs):
                if i == j:
                    continue
                disc = orientation_discrepancy(d, other)
                if disc > par_gate or disc < perp_gate:
                    return False
    return True


def _find_consistent_seed():
    global CONSISTENT_SEED
    if CONSISTENT_SEED is not None:
        return CONSISTENT_SEED
    spec = SceneSpec(n_points=45, n_lines=24, structured_fraction=0.9)
    for seed in range(64):
        if _axis_consistent(generate_scene(spec, seed)):
            CONSISTENT_SEED = seed
            return seed
    raise RuntimeError("no consistent seed found in range")


class TestCriterion01ConsistencyZero:
    def test_consistency_zero(self):
        seed = _find_consistent_seed()
        scene_spec = SceneSpec(n_points=45, n_lines=24, structured_fraction=0.9)
        traj = TrajectorySpec(
            waypoints=orbit_waypoints(2.0, 6, arc_deg=120.0, outward=False),
            frames_per_segment=10)  # 51 poses, trimmed to exactly 50
        scene, frames = simulate_sequence(scene_spec, traj, INTR, NoiseSpec.none(seed=seed))
        frames = frames[:50]
        assert len(frames) == 50
        assert scene.points.shape[0] >= 30 and len(scene.lines) >= 20

        t0 = time.perf_counter()
        cfg = base_cfg(seed=seed)
        result = run_sequence(frames, INTR, cfg, deterministic=True)
        elapsed = time.perf_counter() - t0

        ape = ape_rmse(result.trajectory, gt_trajectory(frames))

        # Eq. 7 cost at ground truth, every frame, oracle matches
        snapshot = MapSnapshot(
            points={i: scene.points[i] for i in range(scene.points.shape[0])},
            lines={j: (seg.start, seg.end) for j, seg in enumerate(scene.lines)},
            point_by_external={i: i for i in range(scene.points.shape[0])},
            line_by_external={j: j for j in range(len(scene.lines))})
        worst_pose_cost = 0.0
        for idx, data in enumerate(frames):
            frame = Frame(data, INTR, idx)
            pose_cw = data.gt_pose_wc.inverse()
            pm, lm = match_to_map(frame, snapshot, pose_cw, "oracle", cfg)
            problem, _, _ = build_pose_problem(frame, pm, lm, snapshot, pose_cw, cfg)
            worst_pose_cost = max(worst_pose_cost, problem.evaluate_cost(strict=True))

        # Eq. 10 cost at ground truth: keyframes at gt poses, oracle matches,
        # gt axes; all reprojection + structural + alignment terms must vanish
        from structvo.line_init import robust_fit_line_3d as fit
        local_map = LocalMap(cfg)
        axes = ManhattanAxes(axes=frames[0].gt_pose_wc.rotation.T @ scene.axes,
                             support=(9, 9, 9), state=COARSE)
        world0 = frames[0].gt_pose_wc
        for idx in range(0, 15, 3):
            data = frames[idx]
            frame = Frame(data, INTR, idx)
            frame.pose_cw = data.gt_pose_wc.inverse().compose(world0)  # map world = first camera
            for j, obs in enumerate(frame.lines):
                res = fit(obs, INTR, cfg, rng=np.random.default_rng([seed, idx, j]))
                frame.line_segments[j] = res.segment
                frame.line_fit_rms[j] = res.rms
            pm, lm = match_to_map(frame, local_map.snapshot(), frame.pose_cw, "oracle", cfg)
            frame.point_matches, frame.line_matches = pm, lm
            kf = local_map.insert_keyframe(frame)
            local_map.associate_structural(kf)
        local_map.reassociate_all_lines(axes)
        problem, *_ = local_map.build_local_problem(max(local_map.keyframes), axes)
        map_cost = problem.evaluate_cost(strict=True)

        print(f"\ncriterion 1: APE {ape:.2e} m; Eq.7 cost {worst_pose_cost:.2e}; "
              f"Eq.10 cost {map_cost:.2e}; runtime {elapsed:.1f} s")
        assert ape < 1e-4
        assert worst_pose_cost < 1e-12
        assert map_cost < 1e-12
        assert elapsed < 30.0


class TestCriterion02TableOneTrend:
    def test_ablation_ordering(self):
        medians = {v: [] for v in ("pl", "pl-depth", "full")}
        for seed in range(TREND_SEEDS):
            scene, frames = make_sequence(TREND_SCENE, TREND_ORBIT, TREND_FPS,
                                          NoiseSpec(pixel_sigma=1.0, seed=seed))
            gt = gt_trajectory(frames)
            base = base_cfg(seed=seed)
            for variant in medians:
                cfg = base.ablation(variant)
                res = run_sequence(frames, INTR, cfg, deterministic=True)
                medians[variant].append(ape_rmse(res.trajectory, gt))
        med = {v: float(np.median(medians[v])) for v in medians}
        improvement = 100.0 * (1.0 - med["full"] / med["pl-depth"])
        print(f"\ncriterion 2: median APE pl={med['pl']:.4f} "
              f"pl-depth={med['pl-depth']:.4f} full={med['full']:.4f} m; "
              f"full improves on pl-depth by {improvement:.0f}%")
        assert med["pl"] > med["pl-depth"] > med["full"]
        assert improvement >= 20.0


class TestCriterion03LineFitRobustness:
    def test_robust_fit_under_gross_outliers(self):
        rng = np.random.default_rng(42)
        n_lines = 200
        ok = 0
        for _ in range(n_lines):
            # random camera-frame segment in front of the camera
            depth = rng.uniform(1.5, 3.0)
            center = np.array([rng.uniform(-0.8, 0.8), rng.uniform(-0.5, 0.5), depth])
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            length = rng.uniform(0.5, 1.2)
            start = center - 0.5 * length * d
            end = center + 0.5 * length * d
            if start[2] < 0.5 or end[2] < 0.5:
                continue
            n_samples = 40
            ts = np.linspace(0, 1, n_samples)
            pts = start[None, :] + ts[:, None] * (end - start)[None, :]
            px = np.column_stack([INTR.fx * pts[:, 0] / pts[:, 2] + INTR.cx,
                                  INTR.fy * pts[:, 1] / pts[:, 2] + INTR.cy])
            depths = pts[:, 2] + rng.normal(0, 0.002, n_samples)
            # 20% gross outliers at interior samples (endpoint occlusion is
            # modeled separately by the simulator's truncation noise)
            n_out = int(round(0.2 * n_samples))
            idx = rng.choice(np.arange(1, n_samples - 1), size=n_out, replace=False)
            depths[idx] += rng.choice([-1.0, 1.0], n_out) * rng.uniform(0.3, 0.7, n_out)
            obs = LineObservation(s=px[0], e=px[-1], sample_px=px, sample_depth=depths)
            fit = robust_fit_line_3d(obs, INTR, RunConfig(), rng=rng)
            if fit.status != OK:
                continue
            angle = np.degrees(np.arccos(min(abs(float(fit.segment.direction @ d)), 1.0)))
            e_start = np.linalg.norm(fit.segment.start - start)
            e_end = np.linalg.norm(fit.segment.end - end)
            if angle < 0.5 and e_start < 5e-3 and e_end < 5e-3:
                ok += 1
        rate = ok / n_lines
        print(f"\ncriterion 3: {ok}/{n_lines} lines within 0.5 deg and 5 mm ({100*rate:.1f}%)")
        assert rate >= 0.95


class TestCriterion04StructuralRefinement:
    def test_refinement_reduces_angular_error(self):
        from structvo.line_init import pair_structural_candidates, refine_endpoints_structural
        improved = 0
        for seed in range(5):
            scene = generate_scene(SceneSpec(n_points=0, n_lines=30,
                                             structured_fraction=0.85), seed=seed)
            pose_wc = orbit_waypoints(2.0, 2, arc_deg=10.0, outward=False)[0]
            noise = NoiseSpec(pixel_sigma=0.5, seed=seed)
            data = render_observations(scene, pose_wc, INTR, noise, 0)
            frame = Frame(data, INTR, 0)
            cfg = base_cfg(seed=seed)
            segments, gt_dirs, responses, rms = [], [], [], []
            pose_cw = pose_wc.inverse()
            for j, obs in enumerate(frame.lines):
                fit = robust_fit_line_3d(obs, INTR, cfg, rng=np.random.default_rng([seed, j]))
                if fit.status != OK:
                    continue
                segments.append(fit.segment)
                responses.append(obs.response)
                rms.append(fit.rms)
                gt_seg = scene.lines[obs.landmark_id]
                gt_dirs.append(pose_cw.rotation @ gt_seg.direction)
            pairs = pair_structural_candidates(segments, responses)
            refined, report = refine_endpoints_structural(segments, pairs, responses, rms, cfg)

            def mean_err(segs):
                errs = []
                for seg, gt_dir in zip(segs, gt_dirs):
                    c = min(abs(float(seg.direction @ gt_dir)), 1.0)
                    errs.append(np.degrees(np.arccos(c)))
                return float(np.mean(errs))

            before, after = mean_err(segments), mean_err(refined)
            print(f"\ncriterion 4 seed {seed}: mean angular error "
                  f"{before:.4f} -> {after:.4f} deg")
            if after < before:
                improved += 1
        assert improved == 5


class TestCriterion05ManhattanAccuracy:
    def test_coarse_accuracy(self):
        for seed in range(3):
            rng = np.random.default_rng(seed)
            gt = so3_exp(rng.uniform(-0.5, 0.5, 3))
            dirs = []
            for k in range(3):
                for _ in range(20):
                    v = gt[:, k] + rng.normal(0, np.radians(2.0), 3)
                    dirs.append(v / np.linalg.norm(v))
            axes = coarse_estimate(np.asarray(dirs), gt @ so3_exp([0.02, -0.02, 0.03]))
            assert axes.valid
            errs = axes.angles_to(gt)
            print(f"\ncriterion 5 (coarse, seed {seed}): per-axis error {np.round(errs, 3)} deg")
            assert np.all(errs < 1.0)

    def test_refined_accuracy_and_orthogonality(self):
        for seed in range(3):
            rng = np.random.default_rng(100 + seed)
            gt = so3_exp(rng.uniform(-0.5, 0.5, 3))
            start = gt @ so3_exp(np.radians(3.0) * np.array([1.0, 0.0, 0.0]))
            coarse = ManhattanAxes(axes=start, support=(9, 9, 9), state=COARSE)
            obs = []
            for k in range(3):
                for _ in range(100):  # 300 associations (criterion: >= 200)
                    v = gt[:, k] + rng.normal(0, np.radians(1.0), 3)
                    obs.append((v / np.linalg.norm(v), k))
            refined, report = refine_axes(coarse, obs, base_cfg(map_max_iterations=150))
            errs = refined.angles_to(gt)
            ortho = np.max(np.abs(refined.axes.T @ refined.axes - np.eye(3)))
            print(f"criterion 5 (refined, seed {seed}): per-axis error "
                  f"{np.round(errs, 4)} deg; orthogonality {ortho:.2e}")
            assert np.all(errs < 0.2)
            assert ortho < 1e-9


class TestCriterion06GracefulDegradation:
    def test_non_manhattan_scene(self):
        noise = NoiseSpec(pixel_sigma=1.0, seed=11)
        scene_kw = dict(n_points=40, n_lines=24, structured_fraction=0.0)
        orbit_kw = dict(radius=2.0, n_waypoints=5, arc_deg=120.0, outward=False)
        scene, frames = make_sequence(scene_kw, orbit_kw, 10, noise)
        gt = gt_trajectory(frames)

        full = run_sequence(frames, INTR, base_cfg(seed=11), deterministic=True)
        baseline_cfg = base_cfg(seed=11, structural_refinement=False, manhattan=False)
        baseline = run_sequence(frames, INTR, baseline_cfg, deterministic=True)

        ape_full = ape_rmse(full.trajectory, gt)
        ape_base = ape_rmse(baseline.trajectory, gt)
        print(f"\ncriterion 6: axes {full.axes.state}; frames "
              f"{len(full.trajectory)}/{len(frames)}; APE full {ape_full:.4f} m "
              f"vs baseline {ape_base:.4f} m")
        assert not full.axes.valid
        assert len(full.trajectory) == len(frames)
        assert ape_full <= 2.0 * ape_base


class TestCriterion07OutlierRobustness:
    def run_contaminated(self, robust, outliers, seed):
        scene_spec = SceneSpec(n_points=45, n_lines=24, structured_fraction=0.9)
        scene = generate_scene(scene_spec, seed=seed)
        traj = generate_trajectory(TrajectorySpec(
            waypoints=orbit_waypoints(2.0, 3, arc_deg=40.0, outward=False),
            frames_per_segment=8))
        rate = 0.2 if outliers else 0.0
        noise = NoiseSpec(pixel_sigma=1.0, match_outlier_rate=rate, seed=seed)
        cfg = base_cfg(seed=seed, robust_loss=robust)
        snapshot = MapSnapshot(
            points={i: scene.points[i] for i in range(scene.points.shape[0])},
            lines={j: (seg.start, seg.end) for j, seg in enumerate(scene.lines)},
            point_by_external={i: i for i in range(scene.points.shape[0])},
            line_by_external={j: j for j in range(len(scene.lines))})
        errors = []
        for idx in (3, 6, 9, 12, 15):
            pose_prev_wc = traj[idx - 1][1]
            pose_wc = traj[idx][1]
            prev = Frame(render_observations(scene, pose_prev_wc, INTR,
                                             NoiseSpec(pixel_sigma=1.0, seed=seed),
                                             idx - 1), INTR, idx - 1)
            prev.pose_cw = pose_prev_wc.inverse()
            pm, lm = match_to_map(prev, snapshot, prev.pose_cw, "oracle", cfg)
            prev.point_matches, prev.line_matches = pm, lm
            frame = Frame(render_observations(scene, pose_wc, INTR, noise, idx), INTR, idx)
            predicted = Pose.exp([0.01, -0.005, 0.01, 0.02, 0.01, -0.02]).compose(
                pose_wc.inverse())
            try:
                pose_cw = estimate_pose(frame, prev, snapshot, predicted, cfg).pose_cw
            except TrackingLostError as exc:
                pose_cw = exc.predicted_pose  # coasting is all that remains
            rot, trans = pose_difference(pose_cw, pose_wc.inverse())
            errors.append(rot + trans)  # combined metric, radians + meters
        return float(np.median(errors))

    def test_huber_bounds_outlier_influence(self):
        seeds = (0, 1, 2)
        clean = np.median([self.run_contaminated(True, False, s) for s in seeds])
        contaminated = np.median([self.run_contaminated(True, True, s) for s in seeds])
        no_robust = np.median([self.run_contaminated(False, True, s) for s in seeds])
        print(f"\ncriterion 7: clean {clean:.2e}; contaminated+huber {contaminated:.2e} "
              f"({contaminated/clean:.2f}x); contaminated w/o robust loss {no_robust:.2e}")
        assert contaminated <= 3.0 * clean
        assert no_robust > contaminated


class TestCriterion08SolverCorrectness:
    def test_every_residual_type_passes_jacobian_check(self):
        rng = np.random.default_rng(5)
        pose = PoseBlock(Pose.exp(rng.uniform(-0.3, 0.3, 6)))
        point = PointBlock([0.3, -0.2, 2.5])
        line = LineEndpointsBlock([0.0, 0.1, 3.0], [1.0, 0.3, 3.4])
        line_b = LineEndpointsBlock([-0.5, 0.4, 2.0], [0.6, -0.2, 2.8])
        axes = [UnitDirectionBlock(v + rng.normal(0, 0.05, 3)) for v in np.eye(3)]
        residuals = {
            "point reprojection": PointReprojectionResidual(pose, point, [300.0, 200.0], 0.7, INTR),
            "point depth": PointDepthResidual(pose, point, 2.4, 0.01),
            "line reprojection": LineReprojectionResidual(
                pose, line, line_coefficients([100.0, 100.0], [400.0, 150.0]), 0.8, INTR),
            "line depth anchor": LineDepthAnchorResidual(pose, line, 3.0, 3.3, 0.01),
            "perpendicular pair": PerpendicularPairResidual(line, line_b, 0.7),
            "parallel pair": ParallelPairResidual(line, line_b, 0.7),
            "axis alignment": LineAxisAlignmentResidual(line, [1.0, 0.0, 0.0], 1.0),
            "axis refinement": AxisRefinementResidual(axes, 0, rng.normal(size=3)),
            "endpoint prior": EndpointPriorResidual(line, 0.3, 0.01),
            "slide prior": LineSlidePriorResidual(line, 1.0),
        }
        # perturb the priors so their residuals are non-trivial
        line.retract(rng.normal(0, 0.01, 6))
        print()
        for name, res in residuals.items():
            dev = check_jacobian(res)
            print(f"criterion 8: {name:20s} jacobian deviation {dev:.2e}")
            assert dev < 1e-5, name

    def test_lm_monotone_on_acceptance_runs(self):
        scene, frames = make_sequence(
            dict(n_points=40, n_lines=24, structured_fraction=0.9),
            dict(radius=2.0, n_waypoints=4, arc_deg=90.0, outward=False), 8,
            NoiseSpec(pixel_sigma=1.0, seed=3))
        result = run_sequence(frames, INTR, base_cfg(seed=3), deterministic=True)
        assert result.reports, "expected tracking reports"
        for rep in result.reports:
            assert rep.stage1_report.final_cost <= rep.stage1_report.initial_cost + 1e-12
            assert rep.stage2_report.final_cost <= rep.stage2_report.initial_cost + 1e-12
        print(f"\ncriterion 8: {len(result.reports)} tracked frames, "
              f"every solve non-increasing")


class TestCriterion09MetricCorrectness:
    def test_umeyama_recovers_known_transform(self):
        rng = np.random.default_rng(9)
        traj = []
        pose = Pose.identity()
        for i in range(15):
            pose = pose.compose(Pose.exp(rng.uniform(-0.05, 0.05, 6)))
            traj.append((i / 30.0, pose))
        R_true = so3_exp([0.3, -0.5, 0.2])
        t_true = np.array([1.0, -2.0, 0.5])
        moved = [(t, Pose(R_true @ p.rotation, R_true @ p.translation + t_true))
                 for t, p in traj]
        _, R, t = umeyama_align(traj, moved)
        err_R = np.max(np.abs(R - R_true))
        err_t = np.max(np.abs(t - t_true))
        print(f"\ncriterion 9: umeyama rotation error {err_R:.2e}, translation {err_t:.2e}")
        assert err_R < 1e-10 and err_t < 1e-10

    def test_ape_matches_hand_computed_fixture(self):
        reference, estimate = [], []
        k = 0
        for i in range(5):
            for sign in (+1.0, -1.0):
                reference.append((float(k), Pose(np.eye(3), np.array([float(i), 0.0, 0.0]))))
                estimate.append((float(k), Pose(np.eye(3), np.array([float(i), sign * 0.02, 0.0]))))
                k += 1
        rmse = ape_rmse(estimate, reference)
        print(f"criterion 9: fixture APE {rmse:.15f} (expected 0.02)")
        assert rmse == pytest.approx(0.02, abs=1e-12)


class TestCriterion10Determinism:
    def test_bitwise_identical_trajectory_files(self, tmp_path):
        from structvo.evaluation import write_trajectory
        scene, frames = make_sequence(
            dict(n_points=40, n_lines=24, structured_fraction=0.9),
            dict(radius=2.0, n_waypoints=4, arc_deg=90.0, outward=False), 8,
            NoiseSpec(pixel_sigma=1.0, seed=21))
        cfg = base_cfg(seed=21)
        paths = []
        for name in ("one", "two"):
            res = run_sequence(frames, INTR, cfg, deterministic=True)
            path = tmp_path / f"{name}.txt"
            write_trajectory(path, res.trajectory)
            paths.append(path)
        identical = paths[0].read_bytes() == paths[1].read_bytes()
        print(f"\ncriterion 10: trajectory files bitwise identical: {identical}")
        assert identical
