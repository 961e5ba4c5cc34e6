import logging
import math
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from ..errors import EmptyCloud
from ..geometry.spatial_index import SpatialIndex
from ..models.geometry import ColoredPointCloud
from ..models.schemas import ColorMetricsReport, MetricParameters

logger = logging.getLogger(__name__)

# Reference points handled per batch in the recall neighbourhood search
_RECALL_CHUNK = 4096


def _require_points(*clouds: ColoredPointCloud):
    for cloud in clouds:
        if cloud.is_empty:
            raise EmptyCloud("metric needs non-empty clouds")


def _nearest_color_errors(query: ColoredPointCloud, index: SpatialIndex, colors: np.ndarray) -> np.ndarray:
    ids, _ = index.nearest_many(query.positions)
    return np.linalg.norm(query.colors - colors[ids], axis=1)


def color_distance(src: ColoredPointCloud, ref: ColoredPointCloud) -> float:
    """
    Bidirectional nearest-neighbour RGB distance

    Args:
        src: Reconstructed colored cloud
        ref: Reference colored cloud

    Returns:
        Half the mean src->ref color error plus half the mean ref->src color error
    """
    _require_points(src, ref)
    forward = _nearest_color_errors(src, SpatialIndex(ref.positions), ref.colors)
    backward = _nearest_color_errors(ref, SpatialIndex(src.positions), src.colors)
    return float(0.5 * np.mean(forward) + 0.5 * np.mean(backward))


def color_fidelity(cd: float, cap: float = 120.0) -> float:
    """Color fidelity in dB, −20·log10(cd), capped when cd is zero"""
    if cd < 0:
        raise ValueError(f"color distance must be non-negative, got {cd}")
    if cd == 0:
        return cap
    return -20.0 * math.log10(cd)


def local_color_recall(src: ColoredPointCloud, ref: ColoredPointCloud, tau: float = 0.1, r_g: float = 0.5) -> float:
    """
    Fraction of reference points with a color match nearby in the reconstruction

    Args:
        src: Reconstructed colored cloud
        ref: Reference colored cloud
        tau: Color threshold; a point is recalled when some neighbour is within 3·tau
        r_g: Neighbourhood radius in meters

    Returns:
        Recalled fraction of reference points
    """
    _require_points(src, ref)
    if tau <= 0 or r_g <= 0:
        raise ValueError(f"tau and r_g must be positive, got {tau} and {r_g}")
    index = SpatialIndex(src.positions)
    threshold = 3.0 * tau

    recalled = 0
    for start in range(0, len(ref), _RECALL_CHUNK):
        stop = min(start + _RECALL_CHUNK, len(ref))
        neighbours = index.radius_many(ref.positions[start:stop], r_g)
        counts = np.array([len(n) for n in neighbours])
        if counts.sum() == 0:
            continue
        flat = np.concatenate(neighbours)
        rows = np.repeat(np.arange(stop - start), counts)
        errors = np.linalg.norm(src.colors[flat] - ref.colors[start:stop][rows], axis=1)
        hit = np.zeros(stop - start, dtype=bool)
        hit[rows[errors <= threshold]] = True
        recalled += int(hit.sum())
    return recalled / len(ref)


class VoxelGrid(BaseModel):
    """Points bucketed into cubic cells anchored at the cloud's minimum corner"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    voxel_size: float
    origin: np.ndarray
    keys: np.ndarray
    assignment: np.ndarray

    @classmethod
    def from_positions(cls, positions: np.ndarray, voxel_size: float) -> "VoxelGrid":
        if voxel_size <= 0:
            raise ValueError(f"voxel size must be positive, got {voxel_size}")
        pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] == 0:
            raise EmptyCloud("cannot voxelize an empty cloud")
        origin = pts.min(axis=0)
        cells = np.floor((pts - origin) / voxel_size).astype(np.int64)
        keys, assignment = np.unique(cells, axis=0, return_inverse=True)
        return cls(voxel_size=voxel_size, origin=origin, keys=keys, assignment=assignment.reshape(-1))

    @property
    def cells(self) -> Dict[Tuple[int, int, int], List[int]]:
        members: Dict[Tuple[int, int, int], List[int]] = {tuple(int(v) for v in key): [] for key in self.keys}
        for point_id, cell in enumerate(self.assignment):
            members[tuple(int(v) for v in self.keys[cell])].append(point_id)
        return members

    def counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=len(self.keys))


def color_consistency_score(cloud: ColoredPointCloud, voxel_size: float = 0.1) -> float:
    """
    Mean per-voxel trace of the RGB sample covariance

    Args:
        cloud: Colored cloud
        voxel_size: Cell edge in meters

    Returns:
        Average over cells holding at least two points; 0 when there are none
    """
    _require_points(cloud)
    grid = VoxelGrid.from_positions(cloud.positions, voxel_size)
    counts = grid.counts()
    n_cells = len(counts)

    sums = np.stack([np.bincount(grid.assignment, weights=cloud.colors[:, c], minlength=n_cells) for c in range(3)], axis=1)
    means = sums / counts[:, None]
    deviation = cloud.colors - means[grid.assignment]
    squared = np.bincount(grid.assignment, weights=np.sum(deviation * deviation, axis=1), minlength=n_cells)

    populated = counts >= 2
    if not np.any(populated):
        return 0.0
    traces = squared[populated] / (counts[populated] - 1)
    return float(np.mean(traces))


def geometric_chamfer(src: ColoredPointCloud, ref: ColoredPointCloud) -> float:
    """Symmetric mean nearest-neighbour position distance in meters"""
    _require_points(src, ref)
    _, forward = SpatialIndex(ref.positions).nearest_many(src.positions)
    _, backward = SpatialIndex(src.positions).nearest_many(ref.positions)
    return float(0.5 * np.mean(forward) + 0.5 * np.mean(backward))


def overlap_fitness(src: ColoredPointCloud, ref: ColoredPointCloud, gate: float = 0.1) -> float:
    """Fraction of src points whose nearest ref point lies within gate"""
    _require_points(src, ref)
    if gate <= 0:
        raise ValueError(f"gate must be positive, got {gate}")
    _, dists = SpatialIndex(ref.positions).nearest_many(src.positions)
    return float(np.mean(dists <= gate))


def evaluate_color_map(
    src: ColoredPointCloud,
    ref: ColoredPointCloud,
    params: Optional[MetricParameters] = None,
) -> ColorMetricsReport:
    """
    Compute every color metric of a reconstruction against a reference

    Args:
        src: Reconstructed colored map
        ref: Reference colored map
        params: Metric parameters

    Returns:
        ColorMetricsReport with CD, CF, LCR and CCS (CCS on the reconstruction)
    """
    params = params or MetricParameters()
    logger.info(f"Evaluating {len(src)} points against {len(ref)} reference points")
    cd = color_distance(src, ref)
    report = ColorMetricsReport(
        cd=cd,
        cf=color_fidelity(cd, params.cf_cap),
        lcr=local_color_recall(src, ref, params.tau, params.r_g),
        ccs=color_consistency_score(src, params.voxel_size),
        parameters=params,
        n_source=len(src),
        n_reference=len(ref),
    )
    logger.info(f"CD {report.cd:.6f}, CF {report.cf:.3f} dB, LCR {report.lcr:.4f}, CCS {report.ccs:.6f}")
    return report
