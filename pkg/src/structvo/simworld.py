"""Synthetic Manhattan-world generator: ground-truth scenes, trajectories and
noisy frame observations. The test oracle for the whole pipeline.

Rendering is a pure function of (scene, pose, intrinsics, noise spec, frame
index): every frame draws from its own seeded stream, so sequences are
bitwise reproducible and frames could be rendered in any order.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError
from .geometry import (CameraIntrinsics, LineObservation, LineSegment3D,
                       PixelPoint, Pose, so3_exp, so3_log)
from .track_io import FrameData

_Z_NEAR = 0.05
_MIN_LINE_PX = 10.0


def _spec_from_dict(cls, data: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass
class SceneSpec:
    extent: float = 8.0                 # horizontal room side, meters
    height: float = 2.5                 # vertical room size, meters
    n_points: int = 60
    n_lines: int = 30
    structured_fraction: float = 0.9    # share of lines exactly axis-aligned
    n_patches: int = 12                 # plane patches supplying surface normals
    line_length: tuple = (0.4, 1.5)
    wall_fraction: float = 0.8          # landmarks concentrated on the walls
    clear_radius: float = 1.8           # keep interior landmarks off the camera path
    manhattan_yaw_deg: float = 0.0      # ground-truth triad = yaw about world y

    def __post_init__(self):
        if self.extent <= 0 or self.height <= 0:
            raise ConfigError("scene extent and height must be positive")
        for name in ("structured_fraction", "wall_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if min(self.n_points, self.n_lines, self.n_patches) < 0:
            raise ConfigError("counts must be >= 0")

    @property
    def n_structured(self):
        return int(round(self.structured_fraction * self.n_lines))

    @property
    def n_oblique(self):
        return self.n_lines - self.n_structured

    @classmethod
    def from_dict(cls, data):
        spec = _spec_from_dict(cls, data)
        if isinstance(spec.line_length, list):
            spec.line_length = tuple(spec.line_length)
        return spec


@dataclass
class NoiseSpec:
    pixel_sigma: float = 1.0
    depth_a: float = 0.001              # sigma_d(z) = a + b z^2
    depth_b: float = 0.0019
    depth_outlier_rate: float = 0.05    # gross per-sample depth corruption
    depth_outlier_mag: float = 0.5      # meters
    match_outlier_rate: float = 0.0     # wrong-id injection for oracle matching
    line_truncation_prob: float = 0.1   # per-endpoint occlusion probability
    line_truncation_max: float = 0.2    # max truncated fraction of the segment
    normal_noise_deg: float = 2.0
    seed: int = 0

    def __post_init__(self):
        for name in ("pixel_sigma", "depth_a", "depth_b", "depth_outlier_mag", "normal_noise_deg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("depth_outlier_rate", "match_outlier_rate", "line_truncation_prob",
                     "line_truncation_max"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")

    @classmethod
    def none(cls, seed=0):
        return cls(pixel_sigma=0.0, depth_a=0.0, depth_b=0.0, depth_outlier_rate=0.0,
                   match_outlier_rate=0.0, line_truncation_prob=0.0, normal_noise_deg=0.0,
                   seed=seed)

    @classmethod
    def from_dict(cls, data):
        return _spec_from_dict(cls, data)

    def depth_sigma(self, z):
        return self.depth_a + self.depth_b * z * z


@dataclass
class TrajectorySpec:
    waypoints: list = field(default_factory=list)  # list[Pose], camera-in-world
    frames_per_segment: int = 10
    frame_rate: float = 30.0

    def __post_init__(self):
        if len(self.waypoints) < 2:
            raise ConfigError("a trajectory needs at least 2 waypoints")
        if self.frames_per_segment < 1 or self.frame_rate <= 0:
            raise ConfigError("frames_per_segment >= 1 and frame_rate > 0 required")


@dataclass
class Scene:
    points: np.ndarray                  # (N, 3) world
    lines: list                         # list[LineSegment3D] world
    line_axes: list                     # gt axis index per line, -1 if oblique
    patches: list                       # list[(center(3,), normal(3,))]
    axes: np.ndarray                    # ground-truth Manhattan triad, columns


def look_at_pose(position, target, up=(0.0, 1.0, 0.0)):
    """Camera-in-world pose with +z looking from position toward target."""
    position = np.asarray(position, dtype=float)
    z = np.asarray(target, dtype=float) - position
    nz = np.linalg.norm(z)
    if nz < 1e-9:
        raise DomainError("look_at target coincides with the camera position")
    z = z / nz
    up = np.asarray(up, dtype=float)
    x = np.cross(up, z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:  # looking straight along up: pick any horizontal right vector
        x = np.cross([1.0, 0.0, 0.0], z)
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(z, x)
    return Pose(np.column_stack([x, y, z]), position)


def orbit_waypoints(radius, n_waypoints, arc_deg=360.0, height=0.0, outward=True):
    """Camera waypoints on a horizontal circle, facing outward (or inward)."""
    poses = []
    for phi in np.radians(np.linspace(0.0, arc_deg, n_waypoints)):
        pos = np.array([radius * np.cos(phi), height, radius * np.sin(phi)])
        target = 2.0 * pos if outward else np.array([0.0, height, 0.0])
        if not outward and radius == 0:
            raise ConfigError("inward orbit needs a positive radius")
        poses.append(look_at_pose(pos, target))
    return poses


def default_intrinsics():
    """Wide-FOV RGB-D style camera used by the built-in scenes (~90 x 74 deg)."""
    return CameraIntrinsics(fx=320.0, fy=320.0, cx=320.0, cy=240.0, width=640, height=480)


def generate_scene(spec: SceneSpec, seed: int) -> Scene:
    """Deterministic landmark set + ground-truth axes for (spec, seed)."""
    if spec.n_points + spec.n_lines == 0:
        raise DomainError("scene with zero landmarks requested")
    rng = np.random.default_rng([seed, 0])
    half = spec.extent / 2.0
    y_half = spec.height / 2.0
    axes = so3_exp([0.0, np.radians(spec.manhattan_yaw_deg), 0.0])

    def sample_position():
        if rng.uniform() < spec.wall_fraction:
            # on one of the four walls, slightly inset
            wall = int(rng.integers(0, 4))
            u = rng.uniform(-half, half)
            y = rng.uniform(-y_half, y_half)
            d = half - rng.uniform(0.0, 0.4)
            if wall == 0:
                return np.array([d, y, u])
            if wall == 1:
                return np.array([-d, y, u])
            if wall == 2:
                return np.array([u, y, d])
            return np.array([u, y, -d])
        for _ in range(1000):
            p = np.array([rng.uniform(-half, half), rng.uniform(-y_half, y_half),
                          rng.uniform(-half, half)])
            if np.hypot(p[0], p[2]) >= spec.clear_radius:
                return p
        raise DomainError("clear_radius leaves no room for interior landmarks")

    points = np.array([sample_position() for _ in range(spec.n_points)]).reshape(-1, 3)

    def inside(p):
        return abs(p[0]) <= half and abs(p[2]) <= half and abs(p[1]) <= y_half

    lines = []
    line_axes = []
    for k in range(spec.n_lines):
        structured = k < spec.n_structured
        if structured:
            axis = int(rng.integers(0, 3))
            direction = axes[:, axis]
        else:
            axis = -1
            v = rng.normal(size=3)
            direction = v / np.linalg.norm(v)
        length = rng.uniform(*spec.line_length)
        for _ in range(1000):
            center = sample_position()
            s = center - 0.5 * length * direction
            e = center + 0.5 * length * direction
            if inside(s) and inside(e):
                break
        lines.append(LineSegment3D(s, e, "world"))
        line_axes.append(axis)

    patches = []
    n_structured_patches = int(round(spec.structured_fraction * spec.n_patches))
    for k in range(spec.n_patches):
        center = sample_position()
        if k < n_structured_patches:
            normal = axes[:, int(rng.integers(0, 3))] * rng.choice([-1.0, 1.0])
        else:
            v = rng.normal(size=3)
            normal = v / np.linalg.norm(v)
        patches.append((center, normal))

    return Scene(points=points, lines=lines, line_axes=line_axes, patches=patches, axes=axes)


def generate_trajectory(spec: TrajectorySpec):
    """Geodesic interpolation between waypoints -> [(timestamp, Pose_wc)]."""
    poses = [spec.waypoints[0]]
    for a, b in zip(spec.waypoints[:-1], spec.waypoints[1:]):
        w = so3_log(a.rotation.T @ b.rotation)
        dt = b.translation - a.translation
        for i in range(1, spec.frames_per_segment + 1):
            s = i / spec.frames_per_segment
            R = a.rotation @ so3_exp(s * w)
            poses.append(Pose(R, a.translation + s * dt))
    return [(i / spec.frame_rate, p) for i, p in enumerate(poses)]


def _clip_segment(start_c, end_c, intr: CameraIntrinsics):
    """Intersect a camera-frame segment with the viewing frustum.

    Every frustum face is linear in the segment parameter t, so the visible
    range is an interval. Returns (t0, t1) or None.
    """
    d = end_c - start_c
    lo, hi = 0.0, 1.0
    # constraints alpha * t + beta >= 0
    constraints = [(d[2], start_c[2] - _Z_NEAR)]  # z >= z_near
    fx, fy, cx, cy = intr.fx, intr.fy, intr.cx, intr.cy
    w, h = intr.width - 1.0, intr.height - 1.0
    # 0 <= u:  fx x + cx z >= 0        u <= w:  (cx - w) z + fx x <= 0
    constraints.append((fx * d[0] + cx * d[2], fx * start_c[0] + cx * start_c[2]))
    constraints.append((-(fx * d[0] + (cx - w) * d[2]), -(fx * start_c[0] + (cx - w) * start_c[2])))
    constraints.append((fy * d[1] + cy * d[2], fy * start_c[1] + cy * start_c[2]))
    constraints.append((-(fy * d[1] + (cy - h) * d[2]), -(fy * start_c[1] + (cy - h) * start_c[2])))
    for alpha, beta in constraints:
        if abs(alpha) < 1e-15:
            if beta < 0:
                return None
            continue
        bound = -beta / alpha
        if alpha > 0:
            lo = max(lo, bound)
        else:
            hi = min(hi, bound)
        if lo >= hi:
            return None
    return lo, hi


def _project_px(intr, pc):
    return np.array([intr.fx * pc[0] / pc[2] + intr.cx, intr.fy * pc[1] / pc[2] + intr.cy])


def _shuffle_ids(observations, rate, rng):
    """Rotate landmark ids among a random subset: every chosen one goes wrong."""
    n = len(observations)
    k = int(round(rate * n))
    if k < 2:
        return observations
    chosen = sorted(rng.choice(n, size=k, replace=False).tolist())
    ids = [observations[i].landmark_id for i in chosen]
    rotated = ids[1:] + ids[:1]
    out = list(observations)
    for i, new_id in zip(chosen, rotated):
        obs = observations[i]
        if isinstance(obs, PixelPoint):
            out[i] = PixelPoint(obs.u, obs.v, obs.depth, obs.response, new_id)
        else:
            out[i] = LineObservation(obs.s, obs.e, obs.response, obs.sample_px,
                                     obs.sample_depth, new_id)
    return out


def render_observations(scene: Scene, pose_wc: Pose, intrinsics: CameraIntrinsics,
                        noise: NoiseSpec, frame_index: int = 0) -> FrameData:
    """Observations of the scene from one camera pose, with noise injected."""
    rng = np.random.default_rng([noise.seed, frame_index + 1])
    pose_cw = pose_wc.inverse()

    points = []
    for pid in range(scene.points.shape[0]):
        pc = pose_cw.transform(scene.points[pid])
        if pc[2] <= _Z_NEAR:
            continue
        px = _project_px(intrinsics, pc)
        if not (0 <= px[0] < intrinsics.width and 0 <= px[1] < intrinsics.height):
            continue
        px_noisy = px + rng.normal(0.0, noise.pixel_sigma, size=2)
        depth = pc[2] + rng.normal(0.0, noise.depth_sigma(pc[2]))
        if not (0 <= px_noisy[0] < intrinsics.width and 0 <= px_noisy[1] < intrinsics.height):
            continue
        points.append(PixelPoint(u=float(px_noisy[0]), v=float(px_noisy[1]),
                                 depth=float(max(depth, _Z_NEAR)),
                                 response=float(rng.uniform(0.1, 1.0)), landmark_id=pid))

    lines = []
    for lid, seg in enumerate(scene.lines):
        s_c = pose_cw.transform(seg.start)
        e_c = pose_cw.transform(seg.end)
        interval = _clip_segment(s_c, e_c, intrinsics)
        if interval is None:
            continue
        t0, t1 = interval
        if rng.uniform() < noise.line_truncation_prob:
            t0 = t0 + rng.uniform(0.0, noise.line_truncation_max) * (t1 - t0)
        if rng.uniform() < noise.line_truncation_prob:
            t1 = t1 - rng.uniform(0.0, noise.line_truncation_max) * (t1 - t0)
        if t1 - t0 < 1e-6:
            continue
        p0 = s_c + t0 * (e_c - s_c)
        p1 = s_c + t1 * (e_c - s_c)
        length_px = float(np.linalg.norm(_project_px(intrinsics, p1) - _project_px(intrinsics, p0)))
        if length_px < _MIN_LINE_PX:
            continue
        n_samples = int(np.clip(length_px / 2.0, 2, 64))
        ts = np.linspace(0.0, 1.0, n_samples)
        pts_c = p0[None, :] + ts[:, None] * (p1 - p0)[None, :]
        px = np.column_stack([intrinsics.fx * pts_c[:, 0] / pts_c[:, 2] + intrinsics.cx,
                              intrinsics.fy * pts_c[:, 1] / pts_c[:, 2] + intrinsics.cy])
        px = px + rng.normal(0.0, noise.pixel_sigma, size=px.shape)
        px[:, 0] = np.clip(px[:, 0], 0.0, intrinsics.width - 1e-3)
        px[:, 1] = np.clip(px[:, 1], 0.0, intrinsics.height - 1e-3)
        depth = pts_c[:, 2] + rng.normal(0.0, 1.0, size=n_samples) * noise.depth_sigma(pts_c[:, 2])
        outliers = rng.uniform(size=n_samples) < noise.depth_outlier_rate
        depth = np.where(outliers,
                         depth + rng.choice([-1.0, 1.0], size=n_samples) * noise.depth_outlier_mag,
                         depth)
        depth = np.maximum(depth, _Z_NEAR)
        if np.linalg.norm(px[-1] - px[0]) < 1.0:
            continue
        lines.append(LineObservation(s=px[0], e=px[-1], response=float(rng.uniform(0.1, 1.0)),
                                     sample_px=px, sample_depth=depth, landmark_id=lid))

    if noise.match_outlier_rate > 0:
        points = _shuffle_ids(points, noise.match_outlier_rate, rng)
        lines = _shuffle_ids(lines, noise.match_outlier_rate, rng)

    # surface normals on a sparse pixel grid: each cell reads the nearest
    # visible patch (a Voronoi stand-in for actual surface coverage)
    grid = []
    visible_patches = []
    for center, normal in scene.patches:
        pc = pose_cw.transform(center)
        if pc[2] <= _Z_NEAR:
            continue
        px = _project_px(intrinsics, pc)
        if 0 <= px[0] < intrinsics.width and 0 <= px[1] < intrinsics.height:
            visible_patches.append((px, normal))
    if visible_patches:
        g = 4
        du, dv = intrinsics.width / g, intrinsics.height / g
        for gi in range(g):
            for gj in range(g):
                u, v = (gi + 0.5) * du, (gj + 0.5) * dv
                dists = [np.hypot(px[0] - u, px[1] - v) for px, _ in visible_patches]
                _, normal = visible_patches[int(np.argmin(dists))]
                n_c = pose_cw.rotation @ normal
                if noise.normal_noise_deg > 0:
                    n_c = n_c + rng.normal(0.0, np.radians(noise.normal_noise_deg), size=3)
                    n_c = n_c / np.linalg.norm(n_c)
                grid.append([u, v, n_c[0], n_c[1], n_c[2]])
    normals = np.asarray(grid, dtype=float).reshape(-1, 5) if grid else None

    return FrameData(timestamp=0.0, points=points, lines=lines, normals=normals,
                     gt_pose_wc=pose_wc)


def simulate_sequence(scene_spec: SceneSpec, traj_spec: TrajectorySpec,
                      intrinsics: CameraIntrinsics, noise: NoiseSpec):
    """Full sequence: returns (scene, frames) with timestamps filled in."""
    scene = generate_scene(scene_spec, noise.seed)
    frames = []
    for i, (t, pose_wc) in enumerate(generate_trajectory(traj_spec)):
        frame = render_observations(scene, pose_wc, intrinsics, noise, frame_index=i)
        frame.timestamp = t
        frames.append(frame)
    return scene, frames
