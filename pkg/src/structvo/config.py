"""Run configuration: every tunable of the pipeline, with documented defaults.

Unknown keys are rejected so configs cannot silently drift out of date.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .errors import ConfigError


@dataclass
class RunConfig:
    # feature toggles (the three ablation columns)
    depth_fit: bool = True             # robust 3D line fitting from depth samples
    structural_refinement: bool = True  # endpoint refinement + structural terms in local BA
    manhattan: bool = True             # axes estimation, association and alignment terms
    robust_loss: bool = True           # Huber on/off (off only for regression tests)
    matching: str = "oracle"           # "oracle" (landmark ids) or "geometric"
    seed: int = 0                      # drives RANSAC sampling; recorded in the manifest

    # solver
    pose_max_iterations: int = 20
    map_max_iterations: int = 40
    f_tol: float = 1e-8
    g_tol: float = 1e-10
    init_lambda: float = 1e-4
    lambda_up: float = 2.0
    lambda_down: float = 3.0
    dense_threshold: int = 250         # tangent dims above this use the sparse path

    # robust loss deltas
    huber_delta_px: float = 1.345      # reprojection residuals (pixels)
    huber_delta_angular: float = 0.05  # dimensionless angular residuals

    # 3D line fitting
    line_min_samples: int = 8
    line_min_inlier_ratio: float = 0.6
    ransac_iterations: int = 50
    inlier_tol_floor: float = 0.01     # meters
    depth_noise_a: float = 0.001       # expected sensor noise model a + b z^2,
    depth_noise_b: float = 0.0019      # used only to scale the RANSAC inlier gate

    # structural constraints
    theta_par_deg: float = 5.0
    theta_perp_deg: float = 5.0
    response_floor: float = 0.1        # responses normalized into (0.1, 1]
    endpoint_prior_fraction: float = 0.05   # prior budget vs initial structural cost
    endpoint_prior_min_sigma: float = 0.01  # meters; floor on the trust radius

    # tracking
    point_search_radius_px: float = 8.0
    line_search_radius_px: float = 8.0
    line_direction_gate_deg: float = 10.0
    chi2_threshold: float = 5.991      # 95% quantile, 2 dof
    assumed_pixel_sigma: float = 2.0   # residual = obs noise + landmark noise
    keyframe_ratio: float = 0.9
    keyframe_min_gap: int = 3
    max_lost_frames: int = 5

    # mapping
    covisibility_min_shared: int = 15
    fuse_point_distance: float = 0.05  # meters
    fuse_line_distance: float = 0.05   # meters (both endpoints)
    fuse_line_angle_deg: float = 5.0
    cull_grace_keyframes: int = 3
    cull_redundancy: float = 0.9
    theta_ma_deg: float = 10.0         # line-to-axis association gate
    ma_weight: float = 1.0             # omega^-1 of each alignment term
    line_slide_prior_weight: float = 1.0  # pins the endpoint-sliding null space
    depth_anchor_weight: float = 1.0   # sensor-depth terms in local BA (0 disables)

    # Manhattan axes
    ma_min_support: int = 10
    ma_axis_min_support: int = 5
    ma_bandwidth_deg: float = 15.0
    ma_cell_deg: float = 30.0
    ma_converge_deg: float = 0.01
    ma_max_iterations: int = 20
    ma_min_keyframes: int = 5
    ma_refine_min_lines: int = 3
    ma_support_angle_deg: float = 10.0

    def __post_init__(self):
        if self.matching not in ("oracle", "geometric"):
            raise ConfigError(f"matching must be 'oracle' or 'geometric', got {self.matching!r}")
        if not 0.0 < self.keyframe_ratio <= 1.0:
            raise ConfigError("keyframe_ratio must be in (0, 1]")
        if self.line_min_samples < 2:
            raise ConfigError("line_min_samples must be >= 2")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must contain a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Stable hash of the full configuration, for the run manifest."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def ablation(self, variant: str) -> "RunConfig":
        """One of the three standard configurations by name."""
        base = self.to_dict()
        if variant == "pl":
            base.update(depth_fit=False, structural_refinement=False, manhattan=False)
        elif variant == "pl-depth":
            base.update(depth_fit=True, structural_refinement=False, manhattan=False)
        elif variant == "full":
            base.update(depth_fit=True, structural_refinement=True, manhattan=True)
        else:
            raise ConfigError(f"unknown ablation variant {variant!r}")
        return RunConfig.from_dict(base)


ABLATION_VARIANTS = ("pl", "pl-depth", "full")
