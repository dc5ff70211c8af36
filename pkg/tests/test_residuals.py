import numpy as np
import pytest

from structvo.geometry import CameraIntrinsics, LineSegment3D, Pose, line_coefficients
from structvo.residuals import (AxisRefinementResidual, EndpointPriorResidual,
                                LineAxisAlignmentResidual, LineReprojectionResidual,
                                ParallelPairResidual, PerpendicularPairResidual,
                                PointReprojectionResidual)
from structvo.solver import (LineEndpointsBlock, PointBlock, PoseBlock,
                             UnitDirectionBlock, check_jacobian)

INTR = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def make_pose_block(seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    return PoseBlock(Pose.exp(rng.uniform(-scale, scale, size=6)))


class TestPointReprojection:
    def test_perfect_observation_is_zero(self):
        pose = Pose.exp([0.1, 0.0, 0.0, 0.2, 0.0, 0.0])
        pw = np.array([0.3, -0.2, 2.5])
        px = np.array([INTR.fx, INTR.fy]) * pose.transform(pw)[:2] / pose.transform(pw)[2] + [INTR.cx, INTR.cy]
        res = PointReprojectionResidual(PoseBlock(pose), PointBlock(pw), px, 1.0, INTR)
        assert np.linalg.norm(res.evaluate()) < 1e-12

    def test_squared_norm_matches_hand_value(self):
        # 3 px u-offset, 4 px v-offset, omega=1 -> energy 25
        pose = Pose.identity()
        pw = np.array([0.0, 0.0, 2.0])
        px = np.array([320.0 + 3.0, 240.0 + 4.0])
        res = PointReprojectionResidual(PoseBlock(pose), PointBlock(pw), px, 1.0, INTR)
        assert np.linalg.norm(res.evaluate()) ** 2 == pytest.approx(25.0)

    def test_omega_halves_energy(self):
        pose = Pose.identity()
        pw = np.array([0.0, 0.0, 2.0])
        px = np.array([323.0, 244.0])
        res = PointReprojectionResidual(PoseBlock(pose), PointBlock(pw), px, 2.0, INTR)
        assert np.linalg.norm(res.evaluate()) ** 2 == pytest.approx(12.5)

    def test_behind_camera_returns_none(self):
        res = PointReprojectionResidual(
            PoseBlock(Pose.identity()), PointBlock([0.0, 0.0, -1.0]), [320.0, 240.0], 1.0, INTR)
        assert res.evaluate() is None

    def test_jacobian(self):
        res = PointReprojectionResidual(
            make_pose_block(1), PointBlock([0.4, -0.3, 3.0]), [300.0, 200.0], 0.6, INTR)
        assert check_jacobian(res) < 1e-5


class TestLineReprojection:
    def _segment_and_coeffs(self, pose, sw, ew):
        ps = pose.transform(sw)
        pe = pose.transform(ew)
        px_s = np.array([INTR.fx * ps[0] / ps[2] + INTR.cx, INTR.fy * ps[1] / ps[2] + INTR.cy])
        px_e = np.array([INTR.fx * pe[0] / pe[2] + INTR.cx, INTR.fy * pe[1] / pe[2] + INTR.cy])
        return line_coefficients(px_s, px_e)

    def test_incidence_is_zero(self):
        pose = Pose.exp([0.05, -0.02, 0.1, 0.3, 0.1, -0.2])
        sw, ew = np.array([0.0, 0.0, 3.0]), np.array([1.0, 0.2, 3.0])
        n = self._segment_and_coeffs(pose, sw, ew)
        res = LineReprojectionResidual(PoseBlock(pose), LineEndpointsBlock(sw, ew), n, 1.0, INTR)
        assert np.linalg.norm(res.evaluate()) < 1e-10

    def test_one_pixel_offsets(self):
        # both projected endpoints exactly 1 px off the observed line -> energy 2
        pose = Pose.identity()
        sw, ew = np.array([-0.5, 0.0, 2.0]), np.array([0.5, 0.0, 2.0])
        n = line_coefficients([INTR.cx - 125.0, INTR.cy + 1.0], [INTR.cx + 125.0, INTR.cy + 1.0])
        res = LineReprojectionResidual(PoseBlock(pose), LineEndpointsBlock(sw, ew), n, 1.0, INTR)
        assert np.linalg.norm(res.evaluate()) ** 2 == pytest.approx(2.0, abs=1e-9)

    def test_sliding_invariance(self):
        # aperture property: a line incident with the observation stays at zero
        # error when translated along its own 3D direction
        pose = Pose.exp([0.05, -0.02, 0.1, 0.3, 0.1, -0.2])
        sw, ew = np.array([0.0, 0.1, 3.0]), np.array([1.0, 0.3, 3.4])
        n = self._segment_and_coeffs(pose, sw, ew)
        d = (ew - sw) / np.linalg.norm(ew - sw)
        for shift in (-0.4, 0.0, 0.25, 0.8):
            moved = LineReprojectionResidual(
                PoseBlock(pose),
                LineEndpointsBlock(sw + shift * d, ew + shift * d), n, 1.0, INTR)
            assert np.linalg.norm(moved.evaluate()) ** 2 == pytest.approx(0.0, abs=1e-10)

    def test_endpoint_behind_camera_returns_none(self):
        res = LineReprojectionResidual(
            PoseBlock(Pose.identity()), LineEndpointsBlock([0, 0, -1.0], [1, 0, 2.0]),
            [0.0, 1.0, -240.0], 1.0, INTR)
        assert res.evaluate() is None

    def test_jacobian(self):
        pose_block = make_pose_block(2, 0.2)
        res = LineReprojectionResidual(
            pose_block, LineEndpointsBlock([0.0, 0.1, 3.0], [1.0, 0.3, 3.4]),
            line_coefficients([100.0, 100.0], [400.0, 150.0]), 0.8, INTR)
        assert check_jacobian(res) < 1e-5


class TestAngularPairs:
    def test_perp_norm_matches_error(self):
        a = LineEndpointsBlock([0, 0, 0], [1, 0, 0])
        b = LineEndpointsBlock([0, 0, 0], [np.cos(np.radians(60)), np.sin(np.radians(60)), 0])
        res = PerpendicularPairResidual(a, b, 2.0)
        assert np.linalg.norm(res.evaluate()) == pytest.approx(0.25)  # d=0.5, omega=2

    def test_perp_orthogonal_zero_and_parallel_one(self):
        a = LineEndpointsBlock([0, 0, 0], [1, 0, 0])
        b = LineEndpointsBlock([0, 0, 0], [0, 1, 0])
        assert np.linalg.norm(PerpendicularPairResidual(a, b, 1.0).evaluate()) == pytest.approx(0.0)
        c = LineEndpointsBlock([1, 2, 3], [3, 2, 3])
        assert np.linalg.norm(PerpendicularPairResidual(a, c, 1.0).evaluate()) == pytest.approx(1.0)

    def test_par_norm_matches_error(self):
        # d = 0.8 -> parallel error 0.6
        ang = np.arccos(0.8)
        a = LineEndpointsBlock([0, 0, 0], [1, 0, 0])
        b = LineEndpointsBlock([0, 0, 0], [np.cos(ang), np.sin(ang), 0])
        assert np.linalg.norm(ParallelPairResidual(a, b, 1.0).evaluate()) == pytest.approx(0.6)

    def test_par_parallel_zero_orthogonal_one(self):
        a = LineEndpointsBlock([0, 0, 0], [1, 0, 0])
        b = LineEndpointsBlock([5, 5, 5], [7, 5, 5])
        assert np.linalg.norm(ParallelPairResidual(a, b, 1.0).evaluate()) == pytest.approx(0.0)
        c = LineEndpointsBlock([0, 0, 0], [0, 2, 0])
        assert np.linalg.norm(ParallelPairResidual(a, c, 1.0).evaluate()) == pytest.approx(1.0)

    def test_sine_cosine_identity(self):
        # par^2 + perp^2 = omega^-2 for any pair
        rng = np.random.default_rng(12)
        for _ in range(100):
            a = LineEndpointsBlock(rng.normal(size=3), rng.normal(size=3))
            b = LineEndpointsBlock(rng.normal(size=3), rng.normal(size=3))
            omega = rng.uniform(0.1, 1.0)
            perp = np.linalg.norm(PerpendicularPairResidual(a, b, omega).evaluate())
            par = np.linalg.norm(ParallelPairResidual(a, b, omega).evaluate())
            assert perp**2 + par**2 == pytest.approx(1.0 / omega**2, abs=1e-12)

    def test_jacobians(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            a = LineEndpointsBlock(rng.normal(size=3), rng.normal(size=3) + 2)
            b = LineEndpointsBlock(rng.normal(size=3), rng.normal(size=3) - 2)
            assert check_jacobian(PerpendicularPairResidual(a, b, 0.7)) < 1e-5
            assert check_jacobian(ParallelPairResidual(a, b, 0.7)) < 1e-5


class TestAxisResiduals:
    def test_line_axis_alignment_jacobian(self):
        blk = LineEndpointsBlock([0.1, 0.0, 0.0], [1.0, 0.2, 0.1])
        res = LineAxisAlignmentResidual(blk, [1.0, 0.0, 0.0], 1.0)
        assert check_jacobian(res) < 1e-5

    def test_axis_refinement_value(self):
        axes = [UnitDirectionBlock(v) for v in np.eye(3)]
        line = np.array([np.cos(np.radians(5)), np.sin(np.radians(5)), 0.0])
        res = AxisRefinementResidual(axes, 0, line)
        # par error to axis0 = sin(5 deg); perp to axis1 = sin(5);  axis2 = 0
        expected = np.sin(np.radians(5)) * 2
        assert res.evaluate()[0] == pytest.approx(expected, abs=1e-12)

    def test_axis_refinement_jacobian_generic(self):
        rng = np.random.default_rng(14)
        for _ in range(10):
            R = Pose.exp(np.concatenate([rng.uniform(-1, 1, 3), np.zeros(3)])).rotation
            axes = [UnitDirectionBlock(R[:, i]) for i in range(3)]
            line = R[:, 0] + rng.normal(size=3) * 0.1
            res = AxisRefinementResidual(axes, 0, line)
            assert check_jacobian(res) < 1e-5

    def test_prior_jacobian(self):
        blk = LineEndpointsBlock([0, 0, 0], [1, 0, 0])
        res = EndpointPriorResidual(blk, 0.3, 0.01)
        blk.retract(np.array([0.01, -0.02, 0.0, 0.0, 0.005, 0.0]))
        assert check_jacobian(res) < 1e-9
