import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError
from .models.schemas import IcpConfig, MetricParameters

logger = logging.getLogger(__name__)

K_SIGMA = 2.0


class PreFusionSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    max_gap: float = Field(default=0.05, gt=0.0)
    linearity_threshold: float = Field(default=0.9, ge=-1.0, le=1.0)
    ransac_iterations: int = Field(default=100, ge=1)
    k_sigma: float = Field(default=K_SIGMA)
    min_overlap_frames: int = Field(default=3, ge=3)

    def model_post_init(self, __context: Any) -> None:
        if self.k_sigma != K_SIGMA:
            raise ValueError(f"k_sigma is fixed at {K_SIGMA}")


class PostFusionSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    beta: float = Field(default=0.1, ge=0.0, le=1.0)
    max_correspondence_distance: float = Field(default=1.0, gt=0.0)
    convergence_tol: float = Field(default=1e-6, gt=0.0)
    max_iterations: int = Field(default=50, ge=1)
    lidar_margin: float = Field(default=1.0, ge=0.0)

    def icp_config(self, anchor_scale: float = 1.0) -> IcpConfig:
        return IcpConfig(
            beta=self.beta,
            max_iterations=self.max_iterations,
            max_correspondence_distance=self.max_correspondence_distance,
            convergence_tol=self.convergence_tol,
            anchor_scale=anchor_scale,
        )


class PoseGraphSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    sigma_trans: float = Field(default=0.05, gt=0.0)
    sigma_rot: float = Field(default=0.01, gt=0.0)
    inter_sigma_trans: float = Field(default=0.05, gt=0.0)
    inter_sigma_rot: float = Field(default=0.01, gt=0.0)
    initial_damping: float = Field(default=1e-4, gt=0.0)
    tol: float = Field(default=1e-8, gt=0.0)
    max_iterations: int = Field(default=100, ge=1)
    strict: bool = False
    icp_max_correspondence_distance: float = Field(default=0.5, gt=0.0)
    icp_max_iterations: int = Field(default=50, ge=1)


class EvaluationSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tau: float = Field(default=0.1, gt=0.0)
    r_g: float = Field(default=0.5, gt=0.0)
    voxel_size: float = Field(default=0.1, gt=0.0)
    cf_cap: float = 120.0
    fitness_gate: float = Field(default=0.1, gt=0.0)

    def metric_parameters(self) -> MetricParameters:
        return MetricParameters(tau=self.tau, r_g=self.r_g, voxel_size=self.voxel_size, cf_cap=self.cf_cap)


class PipelineConfig(BaseSettings):
    """Pipeline settings; environment variables use FUSION_ and '__' for nesting"""

    model_config = SettingsConfigDict(
        env_prefix="FUSION_",
        env_nested_delimiter="__",
        extra="forbid",
    )

    seed: int = Field(default=0, ge=0)
    workers: int = Field(default=1, ge=1)
    prefusion: PreFusionSettings = PreFusionSettings()
    postfusion: PostFusionSettings = PostFusionSettings()
    pgo: PoseGraphSettings = PoseGraphSettings()
    evaluation: EvaluationSettings = EvaluationSettings()


def parse_config_text(text: str) -> Dict[str, Any]:
    """
    Parse flat `section.key = value` lines into a nested dictionary

    Args:
        text: Config file contents

    Returns:
        Nested dictionary suitable for PipelineConfig(**values)
    """
    values: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        parts = key.split(".")
        if len(parts) > 2 or not all(parts):
            raise ConfigError(f"line {lineno}: malformed key '{key}'")
        if len(parts) == 1:
            values[key] = value
        else:
            section = values.setdefault(parts[0], {})
            if not isinstance(section, dict):
                raise ConfigError(f"line {lineno}: '{parts[0]}' is not a section")
            section[parts[1]] = value
    return values


def load_config(path: Optional[Union[str, Path]] = None, **overrides: Any) -> PipelineConfig:
    """Load pipeline settings from environment, optional config file and overrides"""
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        logger.info(f"Loading pipeline config from {path}")
        try:
            values = parse_config_text(path.read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
    for key, value in overrides.items():
        if value is None:
            continue
        if "." in key:
            section, name = key.split(".", 1)
            values.setdefault(section, {})[name] = value
        else:
            values[key] = value
    try:
        return PipelineConfig(**values)
    except (ValidationError, ValueError) as e:
        raise ConfigError(str(e)) from e
