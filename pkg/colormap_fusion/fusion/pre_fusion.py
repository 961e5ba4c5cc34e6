import logging
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.special import softmax

from ..config import K_SIGMA, PreFusionSettings
from ..errors import DegenerateInput, NoInliers, NoPairsFound
from ..geometry.transforms import pca_linearity, project_to_so3, umeyama_sim3
from ..models.geometry import TimedTrajectory, TransformSim3
from ..models.schemas import Extrinsics, PosePair, ScaleConsensus, SessionAlignment

logger = logging.getLogger(__name__)

OverlapPairs = Dict[Tuple[int, int], Tuple[np.ndarray, np.ndarray]]

# Below this spread (relative to the mean scale) all sessions count as one consensus
_SCALE_SPREAD_FLOOR = 1e-9
_SINGULAR_FLOOR = 1e-12


def lidar_to_camera_trajectory(lidar_traj: TimedTrajectory, ext: Extrinsics) -> TimedTrajectory:
    """
    Convert a world-from-LiDAR trajectory into world-from-camera poses

    Args:
        lidar_traj: LiDAR odometry trajectory
        ext: Camera/LiDAR extrinsics and clock offset

    Returns:
        Camera trajectory T_world_cam = T_world_lidar ∘ inverse(cam_from_lidar)
    """
    if len(lidar_traj) == 0:
        raise DegenerateInput("LiDAR trajectory is empty")
    lidar_from_cam = ext.cam_from_lidar.inverse()
    poses = tuple(pose.compose(lidar_from_cam) for pose in lidar_traj.poses)
    return TimedTrajectory(timestamps=lidar_traj.timestamps + ext.time_offset, poses=poses)


def match_timestamps(
    source_times: np.ndarray,
    target_times: np.ndarray,
    max_gap: float,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Nearest-in-time target entry for every source timestamp

    Args:
        source_times: Sorted source timestamps
        target_times: Strictly increasing target timestamps
        max_gap: Largest accepted |Δt| in seconds

    Returns:
        (source indices, target indices, gaps) for the kept matches, in source order.
        Equal gaps resolve to the earlier target entry.
    """
    if max_gap <= 0:
        raise ValueError(f"max_gap must be positive, got {max_gap}")
    src = np.asarray(source_times, dtype=np.float64)
    tgt = np.asarray(target_times, dtype=np.float64)
    if src.size == 0 or tgt.size == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, np.empty(0)

    upper = np.searchsorted(tgt, src, side="left")
    lo = np.clip(upper - 1, 0, tgt.size - 1)
    hi = np.clip(upper, 0, tgt.size - 1)
    gap_lo = np.abs(tgt[lo] - src)
    gap_hi = np.abs(tgt[hi] - src)
    chosen = np.where(gap_hi < gap_lo, hi, lo)
    gaps = np.minimum(gap_lo, gap_hi)

    keep = np.nonzero(gaps <= max_gap)[0]
    return keep.astype(np.int64), chosen[keep].astype(np.int64), gaps[keep]


def pair_poses_by_timestamp(vggt: TimedTrajectory, cam: TimedTrajectory, max_gap: float) -> List[PosePair]:
    """Pair each VGGT pose with the camera pose nearest in time"""
    if len(vggt) == 0 or len(cam) == 0:
        raise NoPairsFound("cannot pair an empty trajectory")
    src_idx, tgt_idx, gaps = match_timestamps(vggt.timestamps, cam.timestamps, max_gap)
    if src_idx.size == 0:
        raise NoPairsFound(f"no camera pose within {max_gap} s of any of {len(vggt)} VGGT poses")

    pairs = [
        PosePair(
            vggt_time=float(vggt.timestamps[i]),
            vggt_pose=vggt.poses[i],
            cam_pose=cam.poses[j],
            time_gap=float(gap),
        )
        for i, j, gap in zip(src_idx, tgt_idx, gaps)
    ]
    logger.debug(f"Paired {len(pairs)}/{len(vggt)} VGGT poses (max gap {max_gap} s)")
    return pairs


def _pair_arrays(pairs: Sequence[PosePair]):
    src = np.stack([p.vggt_pose.translation for p in pairs])
    tgt = np.stack([p.cam_pose.translation for p in pairs])
    return src, tgt


def register_session_poses(pairs: Sequence[PosePair]) -> TransformSim3:
    """Umeyama Sim(3) from VGGT pose translations onto camera pose translations"""
    if len(pairs) < 3:
        raise DegenerateInput(f"pose registration needs at least 3 pairs, got {len(pairs)}")
    src, tgt = _pair_arrays(pairs)
    return umeyama_sim3(src, tgt)


def correct_rotation(initial: TransformSim3, src_rots: Sequence, tgt_rots: Sequence) -> np.ndarray:
    """
    Replace the Umeyama rotation by the chordal mean of per-pose rotation offsets

    Args:
        initial: Registration whose rotation R1 is refined
        src_rots: VGGT camera rotations
        tgt_rots: Paired metric camera rotations

    Returns:
        Corrected rotation ΔR·R1 with ΔR the SO(3) projection of the mean offset
    """
    src = np.asarray(src_rots, dtype=np.float64).reshape(-1, 3, 3)
    tgt = np.asarray(tgt_rots, dtype=np.float64).reshape(-1, 3, 3)
    if src.shape[0] == 0 or src.shape != tgt.shape:
        raise DegenerateInput(f"rotation correction needs matching non-empty lists, got {src.shape[0]} and {tgt.shape[0]}")

    r1 = initial.rotation
    predicted = r1 @ src
    mean_offset = np.mean(tgt @ np.transpose(predicted, (0, 2, 1)), axis=0)

    sigma = np.linalg.svd(mean_offset, compute_uv=False)
    if np.count_nonzero(sigma < _SINGULAR_FLOOR) > 1:
        raise DegenerateInput("mean rotation offset is rank deficient on more than one axis")
    return project_to_so3(mean_offset) @ r1


def align_session(
    vggt: TimedTrajectory,
    cam: TimedTrajectory,
    cfg: Optional[PreFusionSettings] = None,
    session_id: int = 0,
) -> SessionAlignment:
    """
    Coarse Sim(3) alignment of one VGGT session to the metric camera track

    Args:
        vggt: Session trajectory in its own scale-ambiguous frame
        cam: Metric camera trajectory (already converted from LiDAR)
        cfg: Pre-fusion settings
        session_id: Session index recorded in the result

    Returns:
        SessionAlignment with raw and corrected scale equal; inlier status is left open
    """
    cfg = cfg or PreFusionSettings()
    pairs = pair_poses_by_timestamp(vggt, cam, cfg.max_gap)
    transform = register_session_poses(pairs)
    src, tgt = _pair_arrays(pairs)
    linearity = pca_linearity(tgt)

    rotation_corrected = False
    if linearity > cfg.linearity_threshold:
        rotation = correct_rotation(
            transform,
            [p.vggt_pose.rotation for p in pairs],
            [p.cam_pose.rotation for p in pairs],
        )
        translation = tgt.mean(axis=0) - transform.scale * rotation @ src.mean(axis=0)
        transform = TransformSim3(scale=transform.scale, rotation=rotation, translation=translation)
        rotation_corrected = True

    logger.info(
        f"Session {session_id}: {len(pairs)} pairs, linearity {linearity:.4f}, "
        f"scale {transform.scale:.6f}, rotation corrected: {rotation_corrected}"
    )
    return SessionAlignment(
        session_id=session_id,
        transform=transform,
        linearity=float(np.clip(linearity, -1.0, 1.0)),
        raw_scale=transform.scale,
        corrected_scale=transform.scale,
        rotation_corrected=rotation_corrected,
        pair_count=len(pairs),
        vggt_centroid=src.mean(axis=0),
        cam_centroid=tgt.mean(axis=0),
    )


def scale_ransac(
    alignments: Sequence[SessionAlignment],
    iterations: int = 100,
    seed: int = 0,
) -> ScaleConsensus:
    """
    Linearity-weighted RANSAC over per-session scales

    Args:
        alignments: Per-session coarse alignments
        iterations: Number of sampled candidates
        seed: Seed for the sampling generator

    Returns:
        ScaleConsensus with the winning inlier set and their mean scale
    """
    if not alignments:
        raise DegenerateInput("scale RANSAC needs at least one session")
    ordered = sorted(alignments, key=lambda a: a.session_id)
    ids = np.array([a.session_id for a in ordered])
    scales = np.array([a.raw_scale for a in ordered], dtype=np.float64)
    linearity = np.array([a.linearity for a in ordered], dtype=np.float64)

    if len(ordered) == 1:
        return ScaleConsensus(
            best_scale=float(scales[0]),
            inliers={int(ids[0])},
            probabilities=[1.0],
            candidate_session=int(ids[0]),
        )

    spread = float(np.std(scales))
    if spread < _SCALE_SPREAD_FLOOR * float(np.mean(scales)):
        logger.info("Session scales agree exactly; every session is an inlier")
        return ScaleConsensus(
            best_scale=float(np.mean(scales)),
            inliers={int(i) for i in ids},
            probabilities=[1.0 / len(ids)] * len(ids),
            candidate_session=int(ids[0]),
        )

    threshold = K_SIGMA * spread
    alpha = float(np.mean(scales)) / spread
    probabilities = softmax(alpha * linearity)

    rng = np.random.default_rng(seed)
    drawn = rng.choice(len(ids), size=iterations, p=probabilities)

    best_key = None
    best_mask = None
    best_candidate = None
    for candidate in np.unique(drawn):
        mask = np.abs(scales - scales[candidate]) < threshold
        key = (int(mask.sum()), float(linearity[mask].sum()), -int(ids[candidate]))
        if best_key is None or key > best_key:
            best_key, best_mask, best_candidate = key, mask, candidate

    inliers = {int(i) for i in ids[best_mask]}
    best_scale = float(np.mean(scales[best_mask]))
    logger.info(
        f"Scale RANSAC: threshold {threshold:.6f}, alpha {alpha:.3f}, "
        f"inliers {sorted(inliers)}, consensus scale {best_scale:.6f}"
    )
    return ScaleConsensus(
        best_scale=best_scale,
        inliers=inliers,
        threshold=threshold,
        alpha=alpha,
        probabilities=probabilities.tolist(),
        candidate_session=int(ids[best_candidate]),
    )


def _nearest_inlier(session_id: int, inliers: Sequence[int]) -> int:
    return min(inliers, key=lambda j: (abs(j - session_id), j))


def _lookup_overlap(overlap_pairs: OverlapPairs, inlier: int, outlier: int):
    if (inlier, outlier) in overlap_pairs:
        inlier_pts, outlier_pts = overlap_pairs[(inlier, outlier)]
    elif (outlier, inlier) in overlap_pairs:
        outlier_pts, inlier_pts = overlap_pairs[(outlier, inlier)]
    else:
        return None
    return np.asarray(inlier_pts, dtype=np.float64), np.asarray(outlier_pts, dtype=np.float64)


def correct_outlier_scales(
    alignments: Sequence[SessionAlignment],
    inliers: Set[int],
    overlap_pairs: Optional[OverlapPairs] = None,
    min_overlap: int = 3,
) -> List[SessionAlignment]:
    """
    Repair the scale of sessions rejected by the scale RANSAC

    Args:
        alignments: Per-session alignments
        inliers: Inlier session ids
        overlap_pairs: Map (a, b) -> (translations of a, translations of b) over shared frames
        min_overlap: Fewest shared frames accepted for the relative Sim(3)

    Returns:
        Alignments ordered by session id with inlier flags and repaired outliers
    """
    if not inliers:
        raise NoInliers("outlier repair needs at least one inlier session")
    overlap_pairs = overlap_pairs or {}
    by_id = {a.session_id: a for a in alignments}
    inlier_ids = sorted(i for i in inliers if i in by_id)
    if not inlier_ids:
        raise NoInliers(f"inlier ids {sorted(inliers)} match no session")

    repaired = []
    for session_id in sorted(by_id):
        alignment = by_id[session_id]
        if session_id in inliers:
            repaired.append(alignment.model_copy(update={"scale_inlier": True, "corrected_scale": alignment.raw_scale}))
            continue

        anchor = by_id[_nearest_inlier(session_id, inlier_ids)]
        anchor_transform = anchor.final_transform
        overlap = _lookup_overlap(overlap_pairs, anchor.session_id, session_id)

        chained = None
        if overlap is not None and len(overlap[0]) >= min_overlap:
            inlier_pts, outlier_pts = overlap
            try:
                relative = umeyama_sim3(outlier_pts, inlier_pts)
                chained = anchor_transform.compose(relative)
            except DegenerateInput as e:
                logger.warning(f"Session {session_id}: overlap with session {anchor.session_id} is degenerate ({e})")

        if chained is None:
            logger.warning(
                f"Session {session_id}: no usable overlap with session {anchor.session_id}, "
                f"inheriting scale {anchor.corrected_scale:.6f}"
            )
            scale = anchor.corrected_scale
            translation = alignment.transform.translation
            if alignment.vggt_centroid is not None and alignment.cam_centroid is not None:
                translation = alignment.cam_centroid - scale * alignment.transform.rotation @ alignment.vggt_centroid
            chained = TransformSim3(scale=scale, rotation=alignment.transform.rotation, translation=translation)

        logger.info(
            f"Session {session_id}: scale {alignment.raw_scale:.6f} -> {chained.scale:.6f} "
            f"(via session {anchor.session_id})"
        )
        repaired.append(
            alignment.model_copy(
                update={
                    "scale_inlier": False,
                    "corrected_scale": chained.scale,
                    "corrected_transform": chained,
                }
            )
        )
    return repaired


def overlap_translations(
    trajectories: Sequence[TimedTrajectory],
    max_gap: float,
    min_overlap: int = 3,
) -> OverlapPairs:
    """
    Shared-frame translations of consecutive sessions

    Args:
        trajectories: Session trajectories ordered by session id
        max_gap: Largest timestamp difference for two entries to be the same frame
        min_overlap: Fewest shared frames for a pair to be recorded

    Returns:
        Map (k, k+1) -> (translations in session k, translations in session k+1)
    """
    overlap: OverlapPairs = {}
    for k in range(len(trajectories) - 1):
        older, newer = trajectories[k], trajectories[k + 1]
        newer_idx, older_idx, _ = match_timestamps(newer.timestamps, older.timestamps, max_gap)
        if newer_idx.size < min_overlap:
            logger.debug(f"Sessions {k} and {k + 1} share only {newer_idx.size} frames")
            continue
        overlap[(k, k + 1)] = (
            older.translations()[older_idx],
            newer.translations()[newer_idx],
        )
    return overlap
