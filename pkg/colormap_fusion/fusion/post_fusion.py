import logging
from typing import Optional, Tuple

import numpy as np

from ..errors import DegenerateInput, NoCorrespondences
from ..geometry.spatial_index import SpatialIndex
from ..geometry.transforms import bbox_diagonal
from ..models.geometry import ColoredPointCloud, PoseSE3, TransformSim3
from ..models.schemas import IcpConfig, IcpResult

logger = logging.getLogger(__name__)

_DENOMINATOR_FLOOR = 1e-15
# Objectives below this are treated as an exact fit when testing convergence
_OBJECTIVE_FLOOR = 1e-12


def compute_lambda(n: int, bbox_diag: float, beta: float) -> float:
    """Scale regularization weight β·n·D²"""
    if n < 0 or bbox_diag < 0:
        raise ValueError(f"point count and diagonal must be non-negative, got n={n}, D={bbox_diag}")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    return float(beta * n * bbox_diag * bbox_diag)


def closed_form_scale(
    src_points: np.ndarray,
    tgt_points: np.ndarray,
    rotation: np.ndarray,
    translation: np.ndarray,
    lam: float,
    anchor: float,
) -> float:
    """
    Regularized least-squares scale for fixed rotation and translation

    Args:
        src_points: (N, 3) source points p_i
        tgt_points: (N, 3) corresponding target points q_i
        rotation: Current rotation R
        translation: Current translation t
        lam: Regularization weight λ
        anchor: Scale the regularizer pulls towards

    Returns:
        [Σ(q_i − t)ᵀR p_i + λ·anchor] / [Σ‖R p_i‖² + λ]
    """
    p = np.asarray(src_points, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(tgt_points, dtype=np.float64).reshape(-1, 3)
    rotated = p @ np.asarray(rotation).T
    numerator = float(np.sum((q - translation) * rotated)) + lam * anchor
    denominator = float(np.sum(rotated * rotated)) + lam
    if denominator <= _DENOMINATOR_FLOOR:
        raise DegenerateInput("scale update has a vanishing denominator")
    return numerator / denominator


def estimate_rt_fixed_scale(
    src_points: np.ndarray,
    tgt_points: np.ndarray,
    scale: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Procrustes rotation and translation minimizing Σ‖q − (sRp + t)‖² for a fixed s"""
    p = np.asarray(src_points, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(tgt_points, dtype=np.float64).reshape(-1, 3)
    if p.shape[0] < 3 or p.shape != q.shape:
        raise DegenerateInput(f"rigid fit needs at least 3 correspondences, got {p.shape[0]}")
    if np.ptp(p, axis=0).max() == 0.0:
        raise DegenerateInput("source correspondences are all coincident")

    p_mean = p.mean(axis=0)
    q_mean = q.mean(axis=0)
    u, _, vt = np.linalg.svd((q - q_mean).T @ (p - p_mean))
    fix = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        fix[2] = -1.0
    rotation = u @ np.diag(fix) @ vt
    translation = q_mean - scale * rotation @ p_mean
    return rotation, translation


def sim3_objective(
    src_points: np.ndarray,
    tgt_points: np.ndarray,
    transform: TransformSim3,
    lam: float,
    anchor: float,
) -> float:
    """Residual sum Σ‖q − T(p)‖² plus the scale penalty λ(s − anchor)²"""
    residual = np.asarray(tgt_points, dtype=np.float64).reshape(-1, 3) - transform.apply(src_points)
    return float(np.sum(residual * residual)) + lam * (transform.scale - anchor) ** 2


def _objective(p, q, scale, rotation, offset, lam, anchor) -> float:
    residual = q - (scale * (p @ rotation.T) + offset)
    return float(np.sum(residual * residual)) + lam * (scale - anchor) ** 2


def _alternate(
    src_points: np.ndarray,
    index: SpatialIndex,
    init: TransformSim3,
    cfg: IcpConfig,
    lam: float,
    fix_scale: bool,
) -> IcpResult:
    # Points are centred on their centroid c; T(p) = s·R·(p − c) + offset
    center = src_points.mean(axis=0)
    centred = src_points - center
    scale = init.scale
    rotation = np.array(init.rotation)
    offset = init.translation + scale * rotation @ center

    history = []
    converged = False
    used = 0
    kept = 0
    objective = 0.0
    for iteration in range(1, cfg.max_iterations + 1):
        used = iteration
        moved = scale * (centred @ rotation.T) + offset
        ids, dists = index.nearest_many(moved)
        keep = dists <= cfg.max_correspondence_distance
        kept = int(keep.sum())
        if kept < 3:
            raise NoCorrespondences(
                f"{kept} correspondences within {cfg.max_correspondence_distance} m at iteration {iteration}"
            )
        p = centred[keep]
        q = index.points[ids[keep]]

        before = _objective(p, q, scale, rotation, offset, lam, cfg.anchor_scale)
        rotation, offset = estimate_rt_fixed_scale(p, q, scale)
        if not fix_scale:
            scale = closed_form_scale(p, q, rotation, offset, lam, cfg.anchor_scale)
            if scale <= 0:
                raise DegenerateInput(f"scale collapsed to {scale} at iteration {iteration}")
        objective = _objective(p, q, scale, rotation, offset, lam, cfg.anchor_scale)
        history.append(objective)
        logger.debug(f"ICP iteration {iteration}: {kept} pairs, objective {objective:.9g}, scale {scale:.9f}")

        if abs(before - objective) <= cfg.convergence_tol * max(before, _OBJECTIVE_FLOOR):
            converged = True
            break

    transform = TransformSim3(scale=scale, rotation=rotation, translation=offset - scale * rotation @ center)
    return IcpResult(
        transform=transform,
        final_objective=max(objective, 0.0),
        iterations_used=used,
        correspondence_count=kept,
        converged=converged,
        lambda_=lam,
        objective_history=history,
    )


def regularized_sim3_icp(
    src: ColoredPointCloud,
    tgt: ColoredPointCloud,
    init: TransformSim3,
    cfg: Optional[IcpConfig] = None,
) -> IcpResult:
    """
    Sim(3) ICP with the scale pulled towards cfg.anchor_scale

    Args:
        src: VGGT cloud in its own frame
        tgt: Metric LiDAR cloud
        init: Initial transform (the pre-fusion estimate)
        cfg: ICP settings

    Returns:
        IcpResult with the refined transform and the regularized objective
    """
    cfg = cfg or IcpConfig()
    if len(src) < cfg.min_points or len(tgt) < cfg.min_points:
        raise DegenerateInput(f"ICP needs {cfg.min_points} points per cloud, got {len(src)} and {len(tgt)}")

    n = len(src)
    diagonal = bbox_diagonal(init.apply(src.positions))
    lam = compute_lambda(n, diagonal, cfg.beta)
    logger.info(f"Sim(3) ICP on {n} -> {len(tgt)} points, lambda {lam:.6g} (beta {cfg.beta}, D {diagonal:.3f} m)")

    result = _alternate(src.positions, SpatialIndex(tgt.positions), init, cfg, lam, fix_scale=False)
    if not result.converged:
        logger.warning(f"Sim(3) ICP stopped at the iteration cap ({cfg.max_iterations})")
    return result


def icp_se3(
    src: ColoredPointCloud,
    tgt: ColoredPointCloud,
    init: Optional[PoseSE3] = None,
    cfg: Optional[IcpConfig] = None,
) -> Tuple[PoseSE3, float]:
    """
    Point-to-point rigid ICP

    Args:
        src: Cloud to move
        tgt: Fixed cloud
        init: Initial pose, identity when omitted
        cfg: ICP settings; beta and anchor_scale are ignored

    Returns:
        (pose mapping src onto tgt, fraction of src points within the correspondence gate)
    """
    cfg = cfg or IcpConfig()
    init = init or PoseSE3.identity()
    if len(src) < cfg.min_points or len(tgt) < cfg.min_points:
        raise DegenerateInput(f"ICP needs {cfg.min_points} points per cloud, got {len(src)} and {len(tgt)}")

    index = SpatialIndex(tgt.positions)
    rigid_cfg = cfg.model_copy(update={"anchor_scale": 1.0})
    result = _alternate(src.positions, index, TransformSim3.from_pose(init), rigid_cfg, 0.0, fix_scale=True)
    pose = result.transform.rigid_part()

    _, dists = index.nearest_many(pose.apply(src.positions))
    fitness = float(np.mean(dists <= cfg.max_correspondence_distance))
    logger.debug(f"Rigid ICP: {result.iterations_used} iterations, fitness {fitness:.4f}")
    return pose, fitness
