import logging
from pathlib import Path
from typing import Union

import numpy as np
from scipy.spatial.transform import Rotation

from ..errors import NonMonotonicTimestamps, ParseError
from ..models.geometry import PoseSE3, TimedTrajectory

logger = logging.getLogger(__name__)

QUATERNION_NORM_TOL = 1e-3


def read_tum(path: Union[str, Path]) -> TimedTrajectory:
    """
    Read a TUM trajectory: `timestamp tx ty tz qx qy qz qw` per line

    Args:
        path: Trajectory file; `#` lines and blank lines are skipped

    Returns:
        TimedTrajectory with renormalized rotations
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise ParseError(f"cannot read trajectory {path}: {e}") from e

    timestamps = []
    poses = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise ParseError(f"{path}:{lineno}: expected 8 fields, got {len(fields)}")
        try:
            values = np.array([float(f) for f in fields])
        except ValueError as e:
            raise ParseError(f"{path}:{lineno}: {e}") from e
        if not np.all(np.isfinite(values)):
            raise ParseError(f"{path}:{lineno}: non-finite value")

        quat = values[4:8]
        norm = np.linalg.norm(quat)
        if abs(norm - 1.0) > QUATERNION_NORM_TOL:
            raise ParseError(f"{path}:{lineno}: quaternion norm {norm:.6f} is not unit")
        if timestamps and values[0] <= timestamps[-1]:
            raise NonMonotonicTimestamps(f"{path}:{lineno}: timestamp {values[0]} does not increase")

        timestamps.append(values[0])
        poses.append(PoseSE3(rotation=Rotation.from_quat(quat / norm).as_matrix(), translation=values[1:4]))

    logger.debug(f"Read {len(poses)} poses from {path}")
    return TimedTrajectory(timestamps=np.array(timestamps, dtype=np.float64), poses=tuple(poses))


def write_tum(traj: TimedTrajectory, path: Union[str, Path]) -> Path:
    """Write a TUM trajectory with full double precision"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for timestamp, pose in traj.entries():
        quat = Rotation.from_matrix(pose.rotation).as_quat()
        values = [timestamp, *pose.translation, *quat]
        lines.append(" ".join(f"{v:.17g}" for v in values))
    path.write_text("\n".join(lines) + "\n")
    return path
