from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Set, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .geometry import ColoredPointCloud, PoseSE3, TimedTrajectory, TransformSim3

NodeId = Tuple[int, int]


# Pre-fusion

class Extrinsics(BaseModel):
    model_config = ConfigDict(frozen=True)

    cam_from_lidar: PoseSE3
    time_offset: float = 0.0


class PosePair(BaseModel):
    model_config = ConfigDict(frozen=True)

    vggt_time: float
    vggt_pose: PoseSE3
    cam_pose: PoseSE3
    time_gap: float = Field(ge=0.0)


class SessionAlignment(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    session_id: int
    transform: TransformSim3
    linearity: float = Field(ge=-1.0, le=1.0)
    raw_scale: float = Field(gt=0.0)
    corrected_scale: float = Field(gt=0.0)
    scale_inlier: Optional[bool] = None
    rotation_corrected: bool = False
    pair_count: int = 0
    vggt_centroid: Optional[np.ndarray] = None
    cam_centroid: Optional[np.ndarray] = None
    corrected_transform: Optional[TransformSim3] = None

    @model_validator(mode="after")
    def _inlier_keeps_raw_scale(self) -> "SessionAlignment":
        if self.scale_inlier and self.corrected_scale != self.raw_scale:
            raise ValueError("an inlier's corrected scale must equal its raw scale")
        return self

    @property
    def final_transform(self) -> TransformSim3:
        return self.corrected_transform if self.corrected_transform is not None else self.transform

    def summary(self) -> Dict[str, Any]:
        return {
            "session_id": self.session_id,
            "linearity": self.linearity,
            "raw_scale": self.raw_scale,
            "corrected_scale": self.corrected_scale,
            "scale_inlier": self.scale_inlier,
            "rotation_corrected": self.rotation_corrected,
            "pair_count": self.pair_count,
        }


class ScaleConsensus(BaseModel):
    best_scale: float
    inliers: Set[int]
    threshold: float = 0.0
    alpha: Optional[float] = None
    probabilities: List[float] = []
    candidate_session: Optional[int] = None


# Post-fusion

class IcpConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    beta: float = Field(default=0.1, ge=0.0, le=1.0)
    max_iterations: int = Field(default=50, ge=1)
    max_correspondence_distance: float = Field(default=1.0, gt=0.0)
    convergence_tol: float = Field(default=1e-6, gt=0.0)
    anchor_scale: float = Field(default=1.0, gt=0.0)
    min_points: int = Field(default=10, ge=3)


class IcpResult(BaseModel):
    transform: TransformSim3
    final_objective: float = Field(ge=0.0)
    iterations_used: int
    correspondence_count: int
    converged: bool
    lambda_: float = 0.0
    objective_history: List[float] = []


# Pose graph

class PoseNode(BaseModel):
    model_config = ConfigDict(frozen=True)

    node_id: NodeId
    pose: PoseSE3
    fixed: bool = False


class PoseEdge(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    source: NodeId
    target: NodeId
    relative: PoseSE3
    kind: Literal["intra", "inter"]
    information: np.ndarray

    @field_validator("information", mode="before")
    @classmethod
    def _validate_information(cls, v):
        info = np.array(v, dtype=np.float64)
        if info.shape != (6, 6):
            raise ValueError(f"information must be 6x6, got {info.shape}")
        if not np.allclose(info, info.T, atol=1e-12 * max(1.0, np.abs(info).max())):
            raise ValueError("information must be symmetric")
        if np.linalg.eigvalsh(info).min() <= 0:
            raise ValueError("information must be positive definite")
        info.flags.writeable = False
        return info

    @model_validator(mode="after")
    def _distinct_endpoints(self) -> "PoseEdge":
        if self.source == self.target:
            raise ValueError("edge endpoints must differ")
        return self


class PoseGraph(BaseModel):
    nodes: Dict[NodeId, PoseNode]
    edges: List[PoseEdge] = []

    @model_validator(mode="after")
    def _check_structure(self) -> "PoseGraph":
        for edge in self.edges:
            for end in (edge.source, edge.target):
                if end not in self.nodes:
                    raise ValueError(f"edge endpoint {end} is not a node")
        fixed = [n for n in self.nodes.values() if n.fixed]
        if len(fixed) != 1:
            raise ValueError(f"exactly one gauge node required, found {len(fixed)}")
        return self

    @property
    def gauge(self) -> NodeId:
        return next(nid for nid, n in self.nodes.items() if n.fixed)


class PoseGraphResult(BaseModel):
    poses: Dict[NodeId, PoseSE3]
    final_chi2: float
    initial_chi2: float
    iterations: int
    converged: bool
    chi2_history: List[float] = []


# Evaluation

class MetricParameters(BaseModel):
    tau: float = Field(default=0.1, gt=0.0)
    r_g: float = Field(default=0.5, gt=0.0)
    voxel_size: float = Field(default=0.1, gt=0.0)
    cf_cap: float = 120.0


class ColorMetricsReport(BaseModel):
    cd: float = Field(ge=0.0)
    cf: float
    lcr: float = Field(ge=0.0, le=1.0)
    ccs: float = Field(ge=0.0)
    parameters: MetricParameters
    n_source: int
    n_reference: int


# Inputs, synthetic scenes and run reports

class SessionEntry(BaseModel):
    session_id: int = Field(ge=0)
    cloud: Path
    trajectory: Path


class SessionManifest(BaseModel):
    root: Path
    sessions: List[SessionEntry]
    lidar_cloud: Path
    lidar_trajectory: Path
    extrinsics: Path

    @model_validator(mode="after")
    def _contiguous_ids(self) -> "SessionManifest":
        ids = sorted(s.session_id for s in self.sessions)
        if ids != list(range(len(ids))):
            raise ValueError(f"session ids must be 0..K-1, got {ids}")
        self.sessions.sort(key=lambda s: s.session_id)
        return self

    def referenced_paths(self) -> List[Path]:
        paths = [self.lidar_cloud, self.lidar_trajectory, self.extrinsics]
        for entry in self.sessions:
            paths.extend([entry.cloud, entry.trajectory])
        return paths


class SessionData(BaseModel):
    """One VGGT session: its cloud (with per-frame ids) and its trajectory"""

    model_config = ConfigDict(frozen=True)

    session_id: int = Field(ge=0)
    cloud: ColoredPointCloud
    trajectory: TimedTrajectory


class FusionInputs(BaseModel):
    sessions: List[SessionData]
    lidar_cloud: ColoredPointCloud
    lidar_trajectory: TimedTrajectory
    extrinsics: Extrinsics

    @model_validator(mode="after")
    def _ordered_sessions(self) -> "FusionInputs":
        ids = [s.session_id for s in self.sessions]
        if ids != list(range(len(ids))):
            raise ValueError(f"sessions must be ordered 0..K-1, got {ids}")
        return self


class SyntheticSceneSpec(BaseModel):
    seed: int = Field(default=0, ge=0)
    scene_extent: float = Field(default=8.0, gt=0.0)
    point_spacing: float = Field(default=0.1, gt=0.0)
    points_per_frame: int = Field(default=1500, ge=10)
    frames_per_session: int = Field(default=20, ge=3)
    session_count: int = Field(default=4, ge=1)
    overlap_frames: int = Field(default=5, ge=0)
    scale_range: Tuple[float, float] = (0.98, 1.02)
    pose_noise_trans: float = Field(default=0.02, ge=0.0)
    pose_noise_rot: float = Field(default=float(np.deg2rad(0.5)), ge=0.0)
    color_noise_std: float = Field(default=0.02, ge=0.0)
    crop_fraction: float = Field(default=0.6, gt=0.0, le=1.0)
    view_radius: float = Field(default=4.0, gt=0.0)
    frame_spacing: float = Field(default=0.3, gt=0.0)
    frame_period: float = Field(default=0.1, gt=0.0)
    timestamp_jitter: float = Field(default=0.01, ge=0.0)
    time_offset: float = 0.02
    outlier_session: Optional[int] = 1
    outlier_drift: float = Field(default=0.4, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_consistency(self) -> "SyntheticSceneSpec":
        if self.overlap_frames >= self.frames_per_session:
            raise ValueError("overlap must be smaller than the session length")
        low, high = self.scale_range
        if not 0 < low <= high:
            raise ValueError(f"invalid scale range {self.scale_range}")
        if self.outlier_session is not None:
            if not 1 <= self.outlier_session < self.session_count:
                raise ValueError("outlier session must be in 1..K-1 so it shares frames with an earlier session")
            if self.overlap_frames < 3:
                raise ValueError("an outlier session needs at least 3 overlap frames")
        if self.timestamp_jitter >= self.frame_period / 2:
            raise ValueError("timestamp jitter must stay below half the frame period")
        return self

    @property
    def total_frames(self) -> int:
        stride = self.frames_per_session - self.overlap_frames
        return stride * (self.session_count - 1) + self.frames_per_session


class StageRecord(BaseModel):
    index: int
    name: str
    input_hash: str
    output_hash: str
    diagnostics: Dict[str, Any] = {}


class RunReport(BaseModel):
    stages: List[StageRecord] = []
    sessions: List[Dict[str, Any]] = []
    output_points: int = 0
