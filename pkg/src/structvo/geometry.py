"""Core geometric types: camera model, rigid transforms, 2D/3D features.

Conventions used throughout the package:
  * camera frame: +x right, +y down-ish, +z forward (pinhole, rectified);
  * a Pose stored on a frame/keyframe is world-to-camera (the transform that
    appears inside the reprojection formulas);
  * pose tangent vectors are (rotation-vector, translation-delta), i.e. the
    product manifold SO(3) x R^3.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DegenerateSegmentError, DomainError, NumericalError

_EPS = 1e-12


def skew(v):
    """3x3 cross-product matrix: skew(a) @ b == cross(a, b)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w):
    """Rodrigues formula; rotation matrix from a rotation vector."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        # 2nd-order Taylor keeps orthonormality to machine precision here
        return np.eye(3) + K + 0.5 * (K @ K)
    return np.eye(3) + (np.sin(theta) / theta) * K + ((1.0 - np.cos(theta)) / theta**2) * (K @ K)


def quaternion_from_rotation(R):
    """Rotation matrix -> unit quaternion (qx, qy, qz, qw), Shepperd's method."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    q = np.empty(4)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q[3] = 0.25 * s
        q[0] = (R[2, 1] - R[1, 2]) / s
        q[1] = (R[0, 2] - R[2, 0]) / s
        q[2] = (R[1, 0] - R[0, 1]) / s
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q[i] = 0.25 * s
        q[3] = (R[k, j] - R[j, k]) / s
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
    return q / np.linalg.norm(q)


def rotation_from_quaternion(q):
    """Unit quaternion (qx, qy, qz, qw) -> rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def so3_log(R):
    """Rotation vector from a rotation matrix, robust near 0 and pi."""
    q = quaternion_from_rotation(R)
    v = q[:3]
    n = np.linalg.norm(v)
    if n < 1e-12:
        return np.zeros(3)
    theta = 2.0 * np.arctan2(n, q[3])
    if theta > np.pi:  # keep the angle in (-pi, pi]
        theta -= 2.0 * np.pi
    return (theta / n) * v


def _orthonormalize_step(R):
    # one Newton step toward the orthogonal polar factor; keeps long
    # compose chains at machine-precision orthonormality
    return R @ (1.5 * np.eye(3) - 0.5 * (R.T @ R))


@dataclass(frozen=True, eq=False)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise DomainError("principal point must lie inside the image")

    def in_image(self, px):
        px = np.asarray(px, dtype=float)
        u, v = px[..., 0], px[..., 1]
        return (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: x_out = rotation @ x_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise NumericalError("rotation is not in SO(3) within 1e-9")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity():
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def exp(xi):
        """Tangent (w[3], v[3]) -> Pose(Exp(w), v)."""
        xi = np.asarray(xi, dtype=float).reshape(6)
        return Pose(so3_exp(xi[:3]), xi[3:])

    def log(self):
        return np.concatenate([so3_log(self.rotation), self.translation])

    def compose(self, other):
        R = _orthonormalize_step(self.rotation @ other.rotation)
        return Pose(R, self.rotation @ other.translation + self.translation)

    def inverse(self):
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def transform(self, points):
        """Apply to one (3,) point or a stack (N, 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def quaternion(self):
        """(qx, qy, qz, qw) of the rotation part."""
        return quaternion_from_rotation(self.rotation)

    def __repr__(self):
        return f"Pose(t={np.round(self.translation, 4)}, rvec={np.round(so3_log(self.rotation), 4)})"


def pose_difference(a: Pose, b: Pose):
    """(rotation angle [rad], translation distance [m]) between two poses."""
    d = a.inverse().compose(b)
    return float(np.linalg.norm(so3_log(d.rotation))), float(np.linalg.norm(d.translation))


def project(intrinsics: CameraIntrinsics, point):
    """Pinhole projection of camera-frame point(s); z must be positive."""
    p = np.asarray(point, dtype=float)
    z = p[..., 2]
    if np.any(z <= 0):
        raise DomainError("cannot project a point with non-positive depth")
    u = intrinsics.fx * p[..., 0] / z + intrinsics.cx
    v = intrinsics.fy * p[..., 1] / z + intrinsics.cy
    return np.stack([u, v], axis=-1)


def backproject(intrinsics: CameraIntrinsics, pixel, depth):
    """Lift a pixel with metric depth into a camera-frame 3D point."""
    if depth <= 0:
        raise DomainError("backprojection requires depth > 0")
    u, v = np.asarray(pixel, dtype=float)
    return np.array(
        [(u - intrinsics.cx) * depth / intrinsics.fx, (v - intrinsics.cy) * depth / intrinsics.fy, depth]
    )


def normalized_direction_2d(s, e):
    d = np.asarray(e, dtype=float) - np.asarray(s, dtype=float)
    n = np.linalg.norm(d)
    if n <= 0:
        raise DegenerateSegmentError("segment endpoints coincide")
    return d / n


def cos_angle(a, b):
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= 0 or nb <= 0:
        raise DomainError("cos_angle requires non-zero vectors")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def orientation_discrepancy(a, b):
    """|cos(angle)|: 1 for (anti)parallel, 0 for perpendicular directions."""
    return abs(cos_angle(a, b))


def line_coefficients(s, e):
    """Homogeneous 2D line through s and e, scaled so (n0, n1) is unit.

    With that scaling, n . (q, 1) is the signed pixel distance of q to the line.
    """
    s = np.asarray(s, dtype=float)
    e = np.asarray(e, dtype=float)
    n = np.cross(np.append(s, 1.0), np.append(e, 1.0))
    norm = np.linalg.norm(n[:2])
    if norm < _EPS:
        raise DegenerateSegmentError("cannot derive line coefficients from coincident endpoints")
    return n / norm


@dataclass(frozen=True, eq=False)
class PixelPoint:
    u: float
    v: float
    depth: float = 0.0  # 0 means missing
    response: float = 1.0
    landmark_id: int | None = None

    def __post_init__(self):
        if self.depth < 0:
            raise DomainError("point depth must be >= 0")

    @property
    def pixel(self):
        return np.array([self.u, self.v])


@dataclass(frozen=True, eq=False)
class LineObservation:
    """2D segment plus per-pixel depth samples along it."""

    s: np.ndarray
    e: np.ndarray
    response: float = 1.0
    sample_px: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    sample_depth: np.ndarray = field(default_factory=lambda: np.zeros(0))
    landmark_id: int | None = None

    def __post_init__(self):
        s = np.array(self.s, dtype=float).reshape(2)
        e = np.array(self.e, dtype=float).reshape(2)
        if np.linalg.norm(e - s) <= 0:
            raise DegenerateSegmentError("line observation with coincident endpoints")
        px = np.array(self.sample_px, dtype=float).reshape(-1, 2)
        d = np.array(self.sample_depth, dtype=float).reshape(-1)
        if px.shape[0] != d.shape[0]:
            raise DomainError("sample_px and sample_depth lengths differ")
        for name, arr in (("s", s), ("e", e), ("sample_px", px), ("sample_depth", d)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @cached_property
    def direction(self):
        return normalized_direction_2d(self.s, self.e)

    @cached_property
    def coefficients(self):
        return line_coefficients(self.s, self.e)

    @property
    def length(self):
        return float(np.linalg.norm(self.e - self.s))

    def pixel_distance(self, q):
        """Signed distance of pixel q to the (infinite) observed line."""
        q = np.asarray(q, dtype=float)
        return float(self.coefficients @ np.append(q, 1.0))


@dataclass(frozen=True, eq=False)
class LineSegment3D:
    start: np.ndarray
    end: np.ndarray
    frame: str = "camera"  # "camera" or "world"

    def __post_init__(self):
        s = np.array(self.start, dtype=float).reshape(3)
        e = np.array(self.end, dtype=float).reshape(3)
        if np.linalg.norm(e - s) <= 1e-6:
            raise DegenerateSegmentError("3D segment shorter than 1e-6 m")
        if self.frame not in ("camera", "world"):
            raise DomainError(f"unknown frame tag {self.frame!r}")
        s.flags.writeable = False
        e.flags.writeable = False
        object.__setattr__(self, "start", s)
        object.__setattr__(self, "end", e)

    @cached_property
    def direction(self):
        d = self.end - self.start
        return d / np.linalg.norm(d)

    @property
    def length(self):
        return float(np.linalg.norm(self.end - self.start))

    def transformed(self, pose: Pose, frame: str):
        return LineSegment3D(pose.transform(self.start), pose.transform(self.end), frame)


@dataclass(frozen=True, eq=False)
class Point3:
    xyz: np.ndarray
    frame: str = "camera"

    def __post_init__(self):
        p = np.array(self.xyz, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise NumericalError("Point3 components must be finite")
        if self.frame not in ("camera", "world"):
            raise DomainError(f"unknown frame tag {self.frame!r}")
        p.flags.writeable = False
        object.__setattr__(self, "xyz", p)

    def __array__(self, dtype=None):
        return np.asarray(self.xyz, dtype=dtype)
