"""Scale-regularization ablation on a cropped corridor.

The source sees a window of a corridor: both walls but only a fraction of the
length and height the LiDAR target covers. Its points carry depth error along
the wall normal. Without the anchor term the wall separation is the only thing
holding the scale, and the depth error shrinks it to about
w² / (w² + var(depth error)), w being the corridor half-width.
"""
import logging
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from ..fusion.post_fusion import regularized_sim3_icp
from ..models.geometry import ColoredPointCloud, TransformSim3
from ..models.schemas import IcpConfig

logger = logging.getLogger(__name__)

REGULARIZED_TOLERANCE = 0.02
# β = 0 errors above this count as scale distortion
DISTORTION_THRESHOLD = 0.05


class AblationSpec(BaseModel):
    trials: int = Field(default=100, ge=1)
    seed: int = Field(default=0, ge=0)
    center: Tuple[float, float, float] = (3.0, 1.0, 0.0)
    half_width: float = Field(default=0.6, gt=0.0)
    corridor_length: float = Field(default=4.0, gt=0.0)
    corridor_height: float = Field(default=2.0, gt=0.0)
    target_points: int = Field(default=4000, ge=10)
    source_points: int = Field(default=1200, ge=10)
    crop_fraction: float = Field(default=0.4, gt=0.0, le=1.0)
    scale_perturbation: float = Field(default=0.05, gt=0.0, lt=1.0)
    depth_noise: float = Field(default=0.35, ge=0.0, description="Half-range of the uniform source depth error")
    lidar_noise: float = Field(default=0.005, ge=0.0)
    unregularized_beta: float = Field(default=0.0, ge=0.0, le=1.0)
    regularized_beta: float = Field(default=0.5, ge=0.0, le=1.0)
    max_correspondence_distance: float = Field(default=0.75, gt=0.0)
    max_iterations: int = Field(default=50, ge=1)

    @model_validator(mode="after")
    def _ordered_betas(self) -> "AblationSpec":
        if self.unregularized_beta >= self.regularized_beta:
            raise ValueError("the regularized beta must exceed the unregularized one")
        if self.depth_noise >= self.half_width:
            raise ValueError("depth noise must stay below the corridor half-width")
        return self


class AblationTrial(BaseModel):
    trial: int
    initial_scale: float
    unregularized_scale: float
    regularized_scale: float

    @property
    def unregularized_error(self) -> float:
        return abs(self.unregularized_scale - 1.0)

    @property
    def regularized_error(self) -> float:
        return abs(self.regularized_scale - 1.0)


class AblationReport(BaseModel):
    spec: AblationSpec
    trials: List[AblationTrial]

    @property
    def regularization_wins(self) -> float:
        """Fraction of trials where the unregularized scale error is the larger one"""
        return float(np.mean([t.unregularized_error > t.regularized_error for t in self.trials]))

    @property
    def regularized_within_tolerance(self) -> float:
        return float(np.mean([t.regularized_error < REGULARIZED_TOLERANCE for t in self.trials]))

    @property
    def unregularized_distorted(self) -> float:
        """Fraction of trials where β = 0 ends further than DISTORTION_THRESHOLD from the true scale"""
        return float(np.mean([t.unregularized_error > DISTORTION_THRESHOLD for t in self.trials]))

    def summary(self) -> dict:
        return {
            "trials": len(self.trials),
            "regularization_wins": self.regularization_wins,
            "regularized_within_tolerance": self.regularized_within_tolerance,
            "unregularized_distorted": self.unregularized_distorted,
            "mean_unregularized_error": float(np.mean([t.unregularized_error for t in self.trials])),
            "mean_regularized_error": float(np.mean([t.regularized_error for t in self.trials])),
        }


def _corridor(
    rng: np.random.Generator, count: int, length: float, height: float, wall_noise: np.ndarray, spec: AblationSpec
) -> ColoredPointCloud:
    """Two walls at x = ±half_width around spec.center, offset along their normal by wall_noise"""
    # Walls alternate so both sides hold the same number of points
    side = np.resize([-1.0, 1.0], count)
    y = rng.uniform(-0.5 * length, 0.5 * length, size=count)
    z = rng.uniform(-0.5 * height, 0.5 * height, size=count)
    x = side * spec.half_width + wall_noise
    positions = np.column_stack([x, y, z]) + np.asarray(spec.center)
    shade = 0.5 + 0.4 * ((np.floor(y * 2) + np.floor(z * 2)) % 2 - 0.5)
    return ColoredPointCloud(positions=positions, colors=np.repeat(shade[:, None], 3, axis=1))


def run_trial(spec: AblationSpec, trial: int) -> AblationTrial:
    """
    One seeded trial: same source, target and initial scale for both betas

    Args:
        spec: Ablation settings
        trial: Trial index, mixed into the random stream

    Returns:
        AblationTrial with the converged scale of each run (the true scale is 1)
    """
    rng = np.random.default_rng([spec.seed, trial])
    lidar_noise = rng.normal(0.0, spec.lidar_noise, size=spec.target_points)
    target = _corridor(rng, spec.target_points, spec.corridor_length, spec.corridor_height, lidar_noise, spec)
    depth_noise = rng.uniform(-spec.depth_noise, spec.depth_noise, size=spec.source_points)
    crop = spec.crop_fraction
    source = _corridor(
        rng, spec.source_points, crop * spec.corridor_length, crop * spec.corridor_height, depth_noise, spec
    )
    sign = rng.choice([-1.0, 1.0])
    initial_scale = 1.0 + sign * spec.scale_perturbation
    # Scale about the corridor center so the perturbation does not shift the walls
    init = TransformSim3(
        scale=initial_scale,
        rotation=np.eye(3),
        translation=(1.0 - initial_scale) * np.asarray(spec.center),
    )

    scales = []
    for beta in (spec.unregularized_beta, spec.regularized_beta):
        cfg = IcpConfig(
            beta=beta,
            anchor_scale=1.0,
            max_iterations=spec.max_iterations,
            max_correspondence_distance=spec.max_correspondence_distance,
        )
        scales.append(regularized_sim3_icp(source, target, init, cfg).transform.scale)
    return AblationTrial(
        trial=trial,
        initial_scale=initial_scale,
        unregularized_scale=scales[0],
        regularized_scale=scales[1],
    )


def run_ablation(spec: AblationSpec = AblationSpec()) -> AblationReport:
    logger.info(f"Running {spec.trials} ablation trials (beta {spec.unregularized_beta} vs {spec.regularized_beta})")
    report = AblationReport(spec=spec, trials=[run_trial(spec, n) for n in range(spec.trials)])
    logger.info(
        f"Regularization wins {report.regularization_wins:.2%}, "
        f"within {REGULARIZED_TOLERANCE:.0%}: {report.regularized_within_tolerance:.2%}, "
        f"unregularized beyond {DISTORTION_THRESHOLD:.0%}: {report.unregularized_distorted:.2%}"
    )
    return report
