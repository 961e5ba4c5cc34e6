import logging
import re
from pathlib import Path
from typing import Dict, Union

import numpy as np
from pydantic import ValidationError

from ..errors import ManifestError, ParseError
from ..geometry.transforms import project_to_so3
from ..models.geometry import PoseSE3
from ..models.schemas import Extrinsics, FusionInputs, SessionData, SessionEntry, SessionManifest
from .ply import read_ply
from .tum import read_tum

logger = logging.getLogger(__name__)

_SESSION_KEY = re.compile(r"^session\.(\d+)\.(cloud|traj)$")
_FIXED_KEYS = {"lidar_cloud", "lidar_traj", "extrinsics"}
# Extrinsic rotations further than this from SO(3) are rejected rather than projected
_EXTRINSIC_ROTATION_TOL = 1e-6


def read_manifest(path: Union[str, Path]) -> SessionManifest:
    """
    Read a `key = path` manifest; relative paths resolve against its directory

    Args:
        path: Manifest file

    Returns:
        SessionManifest whose referenced files all exist
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent

    fixed: Dict[str, Path] = {}
    sessions: Dict[int, Dict[str, Path]] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ManifestError(f"{path}:{lineno}: expected 'key = path'")
        key, value = (part.strip() for part in line.split("=", 1))
        target = (root / value) if not Path(value).is_absolute() else Path(value)

        match = _SESSION_KEY.match(key)
        if match:
            sessions.setdefault(int(match.group(1)), {})[match.group(2)] = target
        elif key in _FIXED_KEYS:
            fixed[key] = target
        else:
            raise ManifestError(f"{path}:{lineno}: unknown key '{key}'")

    missing_keys = sorted(_FIXED_KEYS - set(fixed))
    if missing_keys:
        raise ManifestError(f"{path}: missing keys {missing_keys}")
    for session_id, files in sessions.items():
        if set(files) != {"cloud", "traj"}:
            raise ManifestError(f"{path}: session {session_id} needs both cloud and traj")

    try:
        manifest = SessionManifest(
            root=root,
            sessions=[
                SessionEntry(session_id=k, cloud=files["cloud"], trajectory=files["traj"])
                for k, files in sessions.items()
            ],
            lidar_cloud=fixed["lidar_cloud"],
            lidar_trajectory=fixed["lidar_traj"],
            extrinsics=fixed["extrinsics"],
        )
    except ValidationError as e:
        raise ManifestError(f"{path}: {e}") from e

    for referenced in manifest.referenced_paths():
        if not referenced.is_file():
            raise ManifestError(f"manifest {path} references a missing file: {referenced}")
    logger.info(f"Manifest {path}: {len(manifest.sessions)} sessions")
    return manifest


def write_manifest(manifest: SessionManifest, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def rel(target: Path) -> str:
        try:
            return Path(target).relative_to(path.parent).as_posix()
        except ValueError:
            return str(target)

    lines = [
        f"lidar_cloud = {rel(manifest.lidar_cloud)}",
        f"lidar_traj = {rel(manifest.lidar_trajectory)}",
        f"extrinsics = {rel(manifest.extrinsics)}",
    ]
    for entry in manifest.sessions:
        lines.append(f"session.{entry.session_id}.cloud = {rel(entry.cloud)}")
        lines.append(f"session.{entry.session_id}.traj = {rel(entry.trajectory)}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_extrinsics(path: Union[str, Path]) -> Extrinsics:
    """
    Read 16 row-major numbers of the 4x4 cam_from_lidar matrix followed by a time offset

    Args:
        path: Extrinsics file, `#` comments allowed

    Returns:
        Extrinsics with the rotation block projected onto SO(3)
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ParseError(f"cannot read extrinsics {path}: {e}") from e

    tokens = []
    for raw in text.splitlines():
        tokens.extend(raw.split("#", 1)[0].split())
    if len(tokens) != 17:
        raise ParseError(f"{path}: expected 17 numbers, got {len(tokens)}")
    try:
        values = np.array([float(t) for t in tokens])
    except ValueError as e:
        raise ParseError(f"{path}: {e}") from e
    if not np.all(np.isfinite(values)):
        raise ParseError(f"{path}: non-finite value")

    matrix = values[:16].reshape(4, 4)
    if not np.allclose(matrix[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
        raise ParseError(f"{path}: last row must be 0 0 0 1")
    rotation = matrix[:3, :3]
    if np.linalg.norm(rotation.T @ rotation - np.eye(3)) > _EXTRINSIC_ROTATION_TOL or np.linalg.det(rotation) < 0:
        raise ParseError(f"{path}: rotation block is not a proper rotation")
    pose = PoseSE3(rotation=project_to_so3(rotation), translation=matrix[:3, 3])
    return Extrinsics(cam_from_lidar=pose, time_offset=float(values[16]))


def write_extrinsics(ext: Extrinsics, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [" ".join(f"{v:.17g}" for v in row) for row in ext.cam_from_lidar.as_matrix()]
    text = "# cam_from_lidar (row-major 4x4)\n" + "\n".join(rows) + f"\n# time offset [s]\n{ext.time_offset:.17g}\n"
    path.write_text(text)
    return path


def load_session_inputs(manifest: SessionManifest) -> FusionInputs:
    """Read every file a manifest references"""
    sessions = [
        SessionData(session_id=entry.session_id, cloud=read_ply(entry.cloud), trajectory=read_tum(entry.trajectory))
        for entry in manifest.sessions
    ]
    return FusionInputs(
        sessions=sessions,
        lidar_cloud=read_ply(manifest.lidar_cloud),
        lidar_trajectory=read_tum(manifest.lidar_trajectory),
        extrinsics=read_extrinsics(manifest.extrinsics),
    )
