"""Concrete residuals: reprojection, structural pairs, axis alignment, priors.

Angular terms enter the solver through smooth equivalents whose norms equal
the defining scalar errors: the perpendicular error |cos| becomes a signed
cosine scalar, the parallel error sqrt(1 - cos^2) a cross-product 3-vector.
The robust cost (Huber of the norm) is therefore unchanged while Jacobians
stay finite at the optimum.
"""

from __future__ import annotations

import numpy as np

from .geometry import CameraIntrinsics, skew
from .solver import (LineEndpointsBlock, PointBlock, PoseBlock, Residual,
                     UnitDirectionBlock)

_Z_MIN = 1e-8


def _proj_jacobian(intr: CameraIntrinsics, pc):
    x, y, z = pc
    return np.array([
        [intr.fx / z, 0.0, -intr.fx * x / (z * z)],
        [0.0, intr.fy / z, -intr.fy * y / (z * z)],
    ])


def _project(intr, pc):
    return np.array([intr.fx * pc[0] / pc[2] + intr.cx, intr.fy * pc[1] / pc[2] + intr.cy])


def _unit_dir_jacobian(start, end):
    """d(direction)/d(end); the start Jacobian is its negative."""
    d = end - start
    n = np.linalg.norm(d)
    u = d / n
    return (np.eye(3) - np.outer(u, u)) / n


class PointReprojectionResidual(Residual):
    """sqrt(weight) * (p - pi(R P_w + t)); squared norm is the Eq.-style energy."""

    dim = 2

    def __init__(self, pose_block: PoseBlock, point_block: PointBlock, measured_px,
                 omega: float, intrinsics: CameraIntrinsics):
        self.blocks = (pose_block, point_block)
        self.measured = np.asarray(measured_px, dtype=float)
        self.scale = 1.0 / np.sqrt(omega)
        self.intr = intrinsics

    def _camera_point(self):
        pose = self.blocks[0].pose
        return pose.rotation @ self.blocks[1].value + pose.translation

    def evaluate(self):
        pc = self._camera_point()
        if pc[2] <= _Z_MIN:
            return None
        return self.scale * (self.measured - _project(self.intr, pc))

    def jacobians(self):
        pose = self.blocks[0].pose
        pw = self.blocks[1].value
        pc = pose.rotation @ pw + pose.translation
        Jpi = _proj_jacobian(self.intr, pc)
        rotated = pose.rotation @ pw
        J_pose = -self.scale * (Jpi @ np.hstack([-skew(rotated), np.eye(3)]))
        J_point = -self.scale * (Jpi @ pose.rotation)
        return [J_pose, J_point]


class PointDepthResidual(Residual):
    """Sensor-depth anchor: (z_cam - measured) / sigma.

    Image-plane residuals leave the map's scale about the anchor pose as a
    zero-cost direction; measured depths make RGB-D scale observable.
    """

    dim = 1

    def __init__(self, pose_block: PoseBlock, point_block: PointBlock,
                 measured_depth: float, sigma: float):
        self.blocks = (pose_block, point_block)
        self.measured = measured_depth
        self.scale = 1.0 / sigma

    def evaluate(self):
        pose = self.blocks[0].pose
        z = pose.rotation[2] @ self.blocks[1].value + pose.translation[2]
        if z <= _Z_MIN:
            return None
        return np.array([self.scale * (z - self.measured)])

    def jacobians(self):
        pose = self.blocks[0].pose
        rotated = pose.rotation @ self.blocks[1].value
        J_pose = self.scale * np.hstack([-skew(rotated), np.eye(3)])[2:3, :]
        J_point = self.scale * pose.rotation[2:3, :]
        return [J_pose, J_point]


class LineDepthAnchorResidual(Residual):
    """Endpoint depth anchors for a map line in its creating keyframe.

    A line observed from a single keyframe is otherwise free to slide along
    the viewing direction at zero image-plane cost; its fitted sample depths
    pin that direction just as measured depths do for points.
    """

    dim = 2

    def __init__(self, pose_block: PoseBlock, line_block: LineEndpointsBlock,
                 depth_start: float, depth_end: float, sigma: float):
        self.blocks = (pose_block, line_block)
        self.measured = np.array([depth_start, depth_end])
        self.scale = 1.0 / sigma

    def evaluate(self):
        pose = self.blocks[0].pose
        blk = self.blocks[1]
        out = np.empty(2)
        for i, pw in enumerate((blk.start, blk.end)):
            z = pose.rotation[2] @ pw + pose.translation[2]
            if z <= _Z_MIN:
                return None
            out[i] = z - self.measured[i]
        return self.scale * out

    def jacobians(self):
        pose = self.blocks[0].pose
        blk = self.blocks[1]
        J_pose = np.zeros((2, 6))
        J_line = np.zeros((2, 6))
        for i, pw in enumerate((blk.start, blk.end)):
            rotated = pose.rotation @ pw
            J_pose[i] = self.scale * np.hstack([-skew(rotated), np.eye(3)])[2]
            J_line[i, 3 * i:3 * i + 3] = self.scale * pose.rotation[2]
        return [J_pose, J_line]


class LineReprojectionResidual(Residual):
    """Signed pixel distances of both projected endpoints to the observed 2D line."""

    dim = 2

    def __init__(self, pose_block: PoseBlock, line_block: LineEndpointsBlock,
                 coefficients, omega: float, intrinsics: CameraIntrinsics):
        self.blocks = (pose_block, line_block)
        self.n = np.asarray(coefficients, dtype=float)
        self.scale = 1.0 / np.sqrt(omega)
        self.intr = intrinsics

    def evaluate(self):
        pose = self.blocks[0].pose
        blk = self.blocks[1]
        out = np.empty(2)
        for i, pw in enumerate((blk.start, blk.end)):
            pc = pose.rotation @ pw + pose.translation
            if pc[2] <= _Z_MIN:
                return None
            px = _project(self.intr, pc)
            out[i] = self.n[:2] @ px + self.n[2]
        return self.scale * out

    def jacobians(self):
        pose = self.blocks[0].pose
        blk = self.blocks[1]
        J_pose = np.zeros((2, 6))
        J_line = np.zeros((2, 6))
        for i, pw in enumerate((blk.start, blk.end)):
            rotated = pose.rotation @ pw
            pc = rotated + pose.translation
            row = self.n[:2] @ _proj_jacobian(self.intr, pc)  # d(residual_i)/d(pc)
            J_pose[i] = self.scale * (row @ np.hstack([-skew(rotated), np.eye(3)]))
            J_line[i, 3 * i:3 * i + 3] = self.scale * (row @ pose.rotation)
        return [J_pose, J_line]


class PerpendicularPairResidual(Residual):
    """Signed cosine between two line directions; |r| equals the perp error."""

    dim = 1

    def __init__(self, block_m: LineEndpointsBlock, block_n: LineEndpointsBlock, omega: float):
        self.blocks = (block_m, block_n)
        self.scale = 1.0 / omega

    def evaluate(self):
        lm = self.blocks[0].direction()
        ln = self.blocks[1].direction()
        return np.array([self.scale * float(lm @ ln)])

    def jacobians(self):
        a, b = self.blocks
        la, lb = a.direction(), b.direction()
        Ja_e = _unit_dir_jacobian(a.start, a.end)
        Jb_e = _unit_dir_jacobian(b.start, b.end)
        row_a = self.scale * (lb @ Ja_e)
        row_b = self.scale * (la @ Jb_e)
        return [np.concatenate([-row_a, row_a])[None, :], np.concatenate([-row_b, row_b])[None, :]]


class ParallelPairResidual(Residual):
    """Cross product of two line directions; ||r|| equals the parallel error."""

    dim = 3

    def __init__(self, block_m: LineEndpointsBlock, block_n: LineEndpointsBlock, omega: float):
        self.blocks = (block_m, block_n)
        self.scale = 1.0 / omega

    def evaluate(self):
        lm = self.blocks[0].direction()
        ln = self.blocks[1].direction()
        return self.scale * np.cross(lm, ln)

    def jacobians(self):
        a, b = self.blocks
        la, lb = a.direction(), b.direction()
        Ja_e = _unit_dir_jacobian(a.start, a.end)
        Jb_e = _unit_dir_jacobian(b.start, b.end)
        Ma = -self.scale * (skew(lb) @ Ja_e)
        Mb = self.scale * (skew(la) @ Jb_e)
        return [np.hstack([-Ma, Ma]), np.hstack([-Mb, Mb])]


class LineAxisAlignmentResidual(Residual):
    """Cross product of a free line direction with a constant Manhattan axis."""

    dim = 3

    def __init__(self, line_block: LineEndpointsBlock, axis, omega: float):
        self.blocks = (line_block,)
        self.axis = np.asarray(axis, dtype=float)
        self.scale = 1.0 / omega

    def evaluate(self):
        return self.scale * np.cross(self.blocks[0].direction(), self.axis)

    def jacobians(self):
        blk = self.blocks[0]
        Je = _unit_dir_jacobian(blk.start, blk.end)
        M = -self.scale * (skew(self.axis) @ Je)
        return [np.hstack([-M, M])]


class EndpointPriorResidual(Residual):
    """Weak anchor keeping refined endpoints near their initial estimate."""

    dim = 6

    def __init__(self, line_block: LineEndpointsBlock, weight: float, sigma: float):
        self.blocks = (line_block,)
        self.initial = line_block.value.copy()
        self.scale = weight / sigma

    def evaluate(self):
        return self.scale * (self.blocks[0].value - self.initial)

    def jacobians(self):
        return [self.scale * np.eye(6)]


class LineSlidePriorResidual(Residual):
    """Pins the unobservable endpoint-sliding directions of a line block.

    Reprojection and angular terms are blind to endpoints moving along the
    line (2 exact null directions per free line); this tiny prior keeps the
    normal equations well-posed and endpoints meaningful.
    """

    dim = 2

    def __init__(self, line_block: LineEndpointsBlock, weight: float):
        self.blocks = (line_block,)
        self.start0 = line_block.start.copy()
        self.end0 = line_block.end.copy()
        self.dir0 = line_block.direction()
        self.weight = weight

    def evaluate(self):
        blk = self.blocks[0]
        return self.weight * np.array([
            self.dir0 @ (blk.start - self.start0),
            self.dir0 @ (blk.end - self.end0),
        ])

    def jacobians(self):
        J = np.zeros((2, 6))
        J[0, :3] = self.weight * self.dir0
        J[1, 3:] = self.weight * self.dir0
        return [J]


class AxisRefinementResidual(Residual):
    """Per-observation axes-refinement term over the three axis blocks.

    Scalar sum: parallel error to the associated axis plus perpendicular
    errors to the other two. Line direction is a constant; Jacobians use
    tangent-projected forms that stay bounded near alignment (subgradient 0
    exactly at a kink).
    """

    dim = 1

    def __init__(self, axis_blocks, associated: int, line_dir, omega: float = 1.0):
        self.blocks = tuple(axis_blocks)
        self.associated = associated
        self.line = np.asarray(line_dir, dtype=float)
        self.line = self.line / np.linalg.norm(self.line)
        self.scale = 1.0 / omega

    def evaluate(self):
        total = 0.0
        for k, blk in enumerate(self.blocks):
            c = float(self.line @ blk.value)
            if k == self.associated:
                s = np.sqrt(max(1.0 - c * c, 0.0))
                # sqrt amplifies rounding of c ~ 1 to ~1e-8; flatten the exact
                # optimum so perfectly aligned inputs are a true fixed point
                total += s if s >= 1e-8 else 0.0
            else:
                total += abs(c)
        return np.array([self.scale * total])

    def jacobians(self):
        out = []
        for k, blk in enumerate(self.blocks):
            u = blk.value
            c = float(self.line @ u)
            tang = self.line - c * u  # (I - uu^T) L, norm = sin(theta)
            if k == self.associated:
                s = np.sqrt(max(1.0 - c * c, 0.0))
                grad = np.zeros(3) if s < 1e-8 else (-c / s) * tang
            else:
                grad = np.sign(c) * tang if abs(c) > 1e-12 else np.zeros(3)
            out.append(self.scale * (grad @ blk.tangent_basis())[None, :])
        return out


class ResidualWrapper(Residual):
    """Scales another residual by a constant; used by invariance tests."""

    def __init__(self, inner: Residual, factor: float):
        self.inner = inner
        self.factor = factor
        self.blocks = inner.blocks
        self.dim = inner.dim

    def evaluate(self):
        r = self.inner.evaluate()
        return None if r is None else self.factor * r

    def jacobians(self):
        return [None if J is None else self.factor * J for J in self.inner.jacobians()]
