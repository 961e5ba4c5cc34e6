import logging
from pathlib import Path
from typing import Union

import numpy as np
from plyfile import PlyData, PlyElement, PlyParseError
from pydantic import ValidationError

from ..errors import MissingProperty, ParseError
from ..models.geometry import ColoredPointCloud

logger = logging.getLogger(__name__)

POSITION_FIELDS = ("x", "y", "z")
COLOR_FIELDS = ("red", "green", "blue")
FRAME_FIELD = "frame"


def _colors_to_unit(raw: np.ndarray) -> np.ndarray:
    if np.issubdtype(raw.dtype, np.integer):
        return raw.astype(np.float64) / 255.0
    colors = raw.astype(np.float64)
    if colors.size and colors.max() > 1.0:
        colors = colors / 255.0
    return colors


def read_ply(path: Union[str, Path]) -> ColoredPointCloud:
    """
    Read a colored point cloud from an ASCII or binary little-endian PLY file

    Args:
        path: PLY file with x, y, z and red, green, blue vertex properties

    Returns:
        ColoredPointCloud with colors scaled to [0, 1]; a `frame` property becomes frame_ids
    """
    path = Path(path)
    try:
        data = PlyData.read(str(path))
    except FileNotFoundError as e:
        raise ParseError(f"PLY file not found: {path}") from e
    except (PlyParseError, ValueError, IndexError, EOFError, UnicodeDecodeError) as e:
        raise ParseError(f"malformed PLY file {path}: {e}") from e

    if "vertex" not in data:
        raise MissingProperty(f"{path} has no vertex element")
    vertex = data["vertex"].data
    names = set(vertex.dtype.names or ())
    for field in POSITION_FIELDS + COLOR_FIELDS:
        if field not in names:
            raise MissingProperty(f"{path} vertex element lacks '{field}'")

    positions = np.stack([vertex[f] for f in POSITION_FIELDS], axis=1).astype(np.float64)
    colors = _colors_to_unit(np.stack([vertex[f] for f in COLOR_FIELDS], axis=1))
    frame_ids = np.asarray(vertex[FRAME_FIELD], dtype=np.int64) if FRAME_FIELD in names else None

    try:
        cloud = ColoredPointCloud(positions=positions, colors=colors, frame_ids=frame_ids)
    except ValidationError as e:
        raise ParseError(f"invalid point data in {path}: {e}") from e
    logger.debug(f"Read {len(cloud)} points from {path}")
    return cloud


def write_ply(cloud: ColoredPointCloud, path: Union[str, Path], ascii: bool = False) -> Path:
    """Write float32 positions and uint8 colors (round half to even), binary little-endian unless ascii"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    fields = [(f, "f4") for f in POSITION_FIELDS] + [(f, "u1") for f in COLOR_FIELDS]
    if cloud.frame_ids is not None:
        fields.append((FRAME_FIELD, "i4"))
    vertex = np.empty(len(cloud), dtype=fields)
    for axis, name in enumerate(POSITION_FIELDS):
        vertex[name] = cloud.positions[:, axis]
    channels = np.rint(cloud.colors * 255.0).astype(np.uint8)
    for axis, name in enumerate(COLOR_FIELDS):
        vertex[name] = channels[:, axis]
    if cloud.frame_ids is not None:
        vertex[FRAME_FIELD] = cloud.frame_ids

    PlyData([PlyElement.describe(vertex, "vertex")], text=ascii, byte_order="<").write(str(path))
    logger.debug(f"Wrote {len(cloud)} points to {path}")
    return path
