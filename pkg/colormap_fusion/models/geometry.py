"""Immutable numeric carriers shared by every stage.

All arrays are float64, copied on construction and flagged read-only, so the
models can be shared between worker threads as they are.
"""
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

ROTATION_TOL = 1e-9


def _frozen_array(value, dtype=np.float64) -> np.ndarray:
    arr = np.array(value, dtype=dtype)
    arr.flags.writeable = False
    return arr


def _check_rotation(rotation: np.ndarray) -> np.ndarray:
    if rotation.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {rotation.shape}")
    if not np.all(np.isfinite(rotation)):
        raise ValueError("rotation contains non-finite entries")
    if np.linalg.norm(rotation.T @ rotation - np.eye(3)) > ROTATION_TOL:
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(rotation) - 1.0) > ROTATION_TOL:
        raise ValueError("rotation has det != +1")
    return rotation


class PoseSE3(BaseModel):
    """Rigid pose: rotation plus translation in meters"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    rotation: np.ndarray
    translation: np.ndarray

    @field_validator("rotation", mode="before")
    @classmethod
    def _validate_rotation(cls, v):
        return _check_rotation(_frozen_array(v))

    @field_validator("translation", mode="before")
    @classmethod
    def _validate_translation(cls, v):
        t = _frozen_array(v).reshape(-1)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ValueError("translation must be a finite 3-vector")
        return t

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "PoseSE3":
        m = np.asarray(matrix, dtype=np.float64)
        return cls(rotation=m[:3, :3], translation=m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """Return self ∘ other (other is applied first)"""
        return PoseSE3(
            rotation=self.rotation @ other.rotation,
            translation=self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rotation=rt, translation=-(rt @ self.translation))

    def between(self, other: "PoseSE3") -> "PoseSE3":
        """Relative pose inverse(self) ∘ other"""
        return self.inverse().compose(other)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts @ self.rotation.T + self.translation


class TransformSim3(BaseModel):
    """Similarity transform p -> s·R·p + t"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    @field_validator("scale")
    @classmethod
    def _validate_scale(cls, v: float) -> float:
        if not np.isfinite(v) or v <= 0:
            raise ValueError(f"scale must be positive, got {v}")
        return float(v)

    @field_validator("rotation", mode="before")
    @classmethod
    def _validate_rotation(cls, v):
        return _check_rotation(_frozen_array(v))

    @field_validator("translation", mode="before")
    @classmethod
    def _validate_translation(cls, v):
        t = _frozen_array(v).reshape(-1)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ValueError("translation must be a finite 3-vector")
        return t

    @classmethod
    def identity(cls) -> "TransformSim3":
        return cls(scale=1.0, rotation=np.eye(3), translation=np.zeros(3))

    @classmethod
    def from_pose(cls, pose: PoseSE3, scale: float = 1.0) -> "TransformSim3":
        return cls(scale=scale, rotation=pose.rotation, translation=pose.translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def rigid_part(self) -> PoseSE3:
        return PoseSE3(rotation=self.rotation, translation=self.translation)

    def with_scale(self, scale: float) -> "TransformSim3":
        return TransformSim3(scale=scale, rotation=self.rotation, translation=self.translation)

    def compose(self, other: "TransformSim3") -> "TransformSim3":
        """Return self ∘ other (other is applied first)"""
        return TransformSim3(
            scale=self.scale * other.scale,
            rotation=self.rotation @ other.rotation,
            translation=self.scale * (self.rotation @ other.translation) + self.translation,
        )

    def inverse(self) -> "TransformSim3":
        inv_scale = 1.0 / self.scale
        rt = self.rotation.T
        return TransformSim3(
            scale=inv_scale,
            rotation=rt,
            translation=-inv_scale * (rt @ self.translation),
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return self.scale * (pts @ self.rotation.T) + self.translation

    def transform_pose(self, pose: PoseSE3) -> PoseSE3:
        """Map a camera-to-frame pose through this transform (scale folds into translation)"""
        return PoseSE3(
            rotation=self.rotation @ pose.rotation,
            translation=self.scale * (self.rotation @ pose.translation) + self.translation,
        )


class ColoredPointCloud(BaseModel):
    """Positions in meters with RGB colors in [0, 1]"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    positions: np.ndarray
    colors: np.ndarray
    frame_ids: Optional[np.ndarray] = None

    @field_validator("positions", mode="before")
    @classmethod
    def _validate_positions(cls, v):
        arr = _frozen_array(v)
        if arr.size == 0:
            arr = _frozen_array(np.empty((0, 3)))
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"positions must be Nx3, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("positions must be finite")
        return arr

    @field_validator("colors", mode="before")
    @classmethod
    def _validate_colors(cls, v):
        arr = _frozen_array(v)
        if arr.size == 0:
            arr = _frozen_array(np.empty((0, 3)))
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"colors must be Nx3, got {arr.shape}")
        if arr.size and (np.min(arr) < 0.0 or np.max(arr) > 1.0 or not np.all(np.isfinite(arr))):
            raise ValueError("color channels must lie in [0, 1]")
        return arr

    @field_validator("frame_ids", mode="before")
    @classmethod
    def _validate_frame_ids(cls, v):
        if v is None:
            return None
        return _frozen_array(np.asarray(v).reshape(-1), dtype=np.int64)

    @model_validator(mode="after")
    def _check_rows(self) -> "ColoredPointCloud":
        n = self.positions.shape[0]
        if self.colors.shape[0] != n:
            raise ValueError("positions and colors must have equal row counts")
        if self.frame_ids is not None and self.frame_ids.shape[0] != n:
            raise ValueError("frame_ids must have one entry per point")
        return self

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    @property
    def is_empty(self) -> bool:
        return self.positions.shape[0] == 0

    @classmethod
    def empty(cls) -> "ColoredPointCloud":
        return cls(positions=np.empty((0, 3)), colors=np.empty((0, 3)))

    @classmethod
    def concatenate(cls, clouds: Sequence["ColoredPointCloud"]) -> "ColoredPointCloud":
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        frame_ids = None
        if all(c.frame_ids is not None for c in clouds):
            frame_ids = np.concatenate([c.frame_ids for c in clouds])
        return cls(
            positions=np.concatenate([c.positions for c in clouds]),
            colors=np.concatenate([c.colors for c in clouds]),
            frame_ids=frame_ids,
        )

    def with_positions(self, positions: np.ndarray) -> "ColoredPointCloud":
        return ColoredPointCloud(positions=positions, colors=self.colors, frame_ids=self.frame_ids)

    def select(self, index) -> "ColoredPointCloud":
        """Subset by boolean mask or integer index array"""
        return ColoredPointCloud(
            positions=self.positions[index],
            colors=self.colors[index],
            frame_ids=None if self.frame_ids is None else self.frame_ids[index],
        )

    def split_frames(self) -> dict:
        """Split into per-frame clouds keyed by frame index"""
        if self.frame_ids is None:
            raise ValueError("cloud carries no frame ids")
        return {int(f): self.select(self.frame_ids == f) for f in np.unique(self.frame_ids)}


class TimedTrajectory(BaseModel):
    """Timestamp-ordered pose sequence (seconds, strictly increasing)"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    timestamps: np.ndarray
    poses: Tuple[PoseSE3, ...]

    @field_validator("timestamps", mode="before")
    @classmethod
    def _validate_timestamps(cls, v):
        ts = _frozen_array(v).reshape(-1)
        if not np.all(np.isfinite(ts)):
            raise ValueError("timestamps must be finite")
        if ts.size > 1 and np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        return ts

    @model_validator(mode="after")
    def _check_lengths(self) -> "TimedTrajectory":
        if len(self.poses) != self.timestamps.shape[0]:
            raise ValueError("one pose per timestamp required")
        return self

    @classmethod
    def from_entries(cls, entries: Iterable[Tuple[float, PoseSE3]]) -> "TimedTrajectory":
        entries = list(entries)
        return cls(
            timestamps=np.array([t for t, _ in entries], dtype=np.float64),
            poses=tuple(p for _, p in entries),
        )

    def __len__(self) -> int:
        return len(self.poses)

    def entries(self):
        return list(zip(self.timestamps.tolist(), self.poses))

    def translations(self) -> np.ndarray:
        if not self.poses:
            return np.empty((0, 3))
        return np.stack([p.translation for p in self.poses])

    def rotations(self) -> np.ndarray:
        if not self.poses:
            return np.empty((0, 3, 3))
        return np.stack([p.rotation for p in self.poses])
