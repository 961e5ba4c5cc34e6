"""Deterministic synthetic scenes standing in for VGGT sessions and LiDAR odometry.

A corridor of ground, two walls and boxes is sampled on a grid and observed
along a sinuous camera path. Every random draw comes from a generator seeded by
(seed, purpose, index), so a frame's subsample and pose noise do not depend on
how many sessions or frames surround it.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.spatial.transform import Rotation

from ..io.manifest import write_extrinsics, write_manifest
from ..io.ply import write_ply
from ..io.tum import write_tum
from ..models.geometry import ColoredPointCloud, PoseSE3, TimedTrajectory, TransformSim3
from ..models.schemas import (
    Extrinsics,
    FusionInputs,
    SessionData,
    SessionEntry,
    SessionManifest,
    SyntheticSceneSpec,
)

logger = logging.getLogger(__name__)

CAMERA_HEIGHT = 1.5
WALL_HEIGHT = 3.0
TILE_SIZE = 1.0
TEXTURE_STD = 0.03

# Generator streams
_SUBSAMPLE, _POSE_NOISE, _SESSION, _COLOR_NOISE, _JITTER, _EXTRINSICS, _LAYOUT = range(1, 8)


def _stream(seed: int, purpose: int, *index: int) -> np.random.Generator:
    return np.random.default_rng([seed, purpose, *index])


class SyntheticScene(BaseModel):
    """Degraded pipeline inputs together with the truth they were made from"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    spec: SyntheticSceneSpec
    inputs: FusionInputs
    ground_truth: ColoredPointCloud
    frame_poses: Tuple[PoseSE3, ...]
    vggt_to_world: Tuple[TransformSim3, ...]
    session_frames: Tuple[Tuple[int, ...], ...]

    def sidecar(self) -> Dict:
        return {
            "seed": self.spec.seed,
            "outlier_session": self.spec.outlier_session,
            "vggt_to_world": [
                {"scale": t.scale, "rotation": t.rotation.tolist(), "translation": t.translation.tolist()}
                for t in self.vggt_to_world
            ],
            "frame_poses": [
                {"rotation": p.rotation.tolist(), "translation": p.translation.tolist()} for p in self.frame_poses
            ],
            "session_frames": [list(frames) for frames in self.session_frames],
        }


def camera_path(spec: SyntheticSceneSpec) -> List[PoseSE3]:
    """World-from-camera poses along a sine curve, heading along the tangent"""
    arc = np.arange(spec.total_frames) * spec.frame_spacing
    amplitude = 0.15 * spec.scene_extent
    wavenumber = 2.0 * np.pi / spec.scene_extent
    lateral = amplitude * np.sin(wavenumber * arc)
    heading = np.arctan2(amplitude * wavenumber * np.cos(wavenumber * arc), 1.0)

    rotations = Rotation.from_euler("z", heading).as_matrix()
    return [
        PoseSE3(rotation=rotations[f], translation=[arc[f], lateral[f], CAMERA_HEIGHT])
        for f in range(spec.total_frames)
    ]


def _grid(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    ga, gb = np.meshgrid(a, b, indexing="ij")
    return ga.reshape(-1), gb.reshape(-1)


def _build_scene(spec: SyntheticSceneSpec, path: List[PoseSE3]) -> Tuple[np.ndarray, np.ndarray]:
    rng = _stream(spec.seed, _LAYOUT)
    h = spec.point_spacing
    x_min = -spec.view_radius
    x_max = path[-1].translation[0] + spec.view_radius
    half_width = spec.scene_extent / 2.0
    wall_offset = spec.scene_extent / 4.0
    xs = np.arange(x_min, x_max + h / 2, h)

    positions = []
    colors = []

    # Ground: checkerboard tiles
    gx, gy = _grid(xs, np.arange(-half_width, half_width + h / 2, h))
    tiles = (np.floor(gx / TILE_SIZE) + np.floor(gy / TILE_SIZE)).astype(int) % 2
    palette = np.array([[0.55, 0.5, 0.45], [0.25, 0.3, 0.35]])
    positions.append(np.column_stack([gx, gy, np.zeros_like(gx)]))
    colors.append(palette[tiles])

    # Walls: horizontal stripes, one palette per side
    zs = np.arange(h, WALL_HEIGHT + h / 2, h)
    for side, stripe_colors in ((-1.0, [[0.8, 0.2, 0.2], [0.9, 0.85, 0.7]]), (1.0, [[0.2, 0.4, 0.8], [0.7, 0.9, 0.75]])):
        wx, wz = _grid(xs, zs)
        stripes = np.floor(wz / 0.5).astype(int) % 2
        positions.append(np.column_stack([wx, np.full_like(wx, side * wall_offset), wz]))
        colors.append(np.array(stripe_colors)[stripes])

    # Boxes: top and four sides
    n_boxes = max(3, int((x_max - x_min) / 2.0))
    for _ in range(n_boxes):
        cx = rng.uniform(x_min + 1.0, x_max - 1.0)
        cy = rng.uniform(-wall_offset + 0.8, wall_offset - 0.8)
        sx, sy = rng.uniform(0.4, 1.0, size=2)
        height = rng.uniform(0.3, 1.0)
        color = rng.uniform(0.1, 0.9, size=3)
        bx = np.arange(cx - sx / 2, cx + sx / 2 + h / 4, h / 2)
        by = np.arange(cy - sy / 2, cy + sy / 2 + h / 4, h / 2)
        bz = np.arange(h / 2, height + h / 4, h / 2)

        faces = []
        tx, ty = _grid(bx, by)
        faces.append(np.column_stack([tx, ty, np.full_like(tx, height)]))
        for y_face in (by[0], by[-1]):
            fx, fz = _grid(bx, bz)
            faces.append(np.column_stack([fx, np.full_like(fx, y_face), fz]))
        for x_face in (bx[0], bx[-1]):
            fy, fz = _grid(by, bz)
            faces.append(np.column_stack([np.full_like(fy, x_face), fy, fz]))
        box = np.concatenate(faces)
        positions.append(box)
        colors.append(np.tile(color, (len(box), 1)))

    positions = np.concatenate(positions)
    colors = np.concatenate(colors)
    colors = np.clip(colors + rng.normal(0.0, TEXTURE_STD, size=colors.shape), 0.0, 1.0)
    return positions, colors


def _view_center(pose: PoseSE3) -> np.ndarray:
    # Halfway between camera and ground, so small view boxes still reach the floor
    return pose.translation - np.array([0.0, 0.0, CAMERA_HEIGHT / 2.0])


def _in_box(positions: np.ndarray, center: np.ndarray, half_extent: float) -> np.ndarray:
    return np.nonzero(np.all(np.abs(positions - center) <= half_extent, axis=1))[0]


def _noisy_pose(spec: SyntheticSceneSpec, pose: PoseSE3, frame: int) -> PoseSE3:
    rng = _stream(spec.seed, _POSE_NOISE, frame)
    d_trans = rng.normal(0.0, spec.pose_noise_trans / np.sqrt(3.0), size=3)
    d_rot = rng.normal(0.0, spec.pose_noise_rot / np.sqrt(3.0), size=3)
    return PoseSE3(
        rotation=pose.rotation @ Rotation.from_rotvec(d_rot).as_matrix(),
        translation=pose.translation + d_trans,
    )


def _session_transform(spec: SyntheticSceneSpec, session_id: int) -> TransformSim3:
    """World -> VGGT similarity of one session"""
    rng = _stream(spec.seed, _SESSION, session_id)
    low, high = spec.scale_range
    scale = rng.uniform(low, high) if high > low else low
    rotation = Rotation.from_quat(rng.normal(size=4)).as_matrix()
    return TransformSim3(scale=scale, rotation=rotation, translation=rng.uniform(-5.0, 5.0, size=3))


def generate_synthetic_scene(spec: SyntheticSceneSpec) -> SyntheticScene:
    """
    Build a scene, its metric LiDAR products and K degraded VGGT sessions

    Args:
        spec: Scene parameters

    Returns:
        SyntheticScene with pipeline inputs and ground truth
    """
    path = camera_path(spec)
    scene_pts, scene_colors = _build_scene(spec, path)
    logger.info(f"Synthetic scene: {len(scene_pts)} points, {spec.total_frames} frames, seed {spec.seed}")

    crop_half = spec.crop_fraction * spec.view_radius
    crops = []
    for f, pose in enumerate(path):
        ids = _in_box(scene_pts, _view_center(pose), crop_half)
        if ids.size > spec.points_per_frame:
            ids = np.sort(_stream(spec.seed, _SUBSAMPLE, f).choice(ids, spec.points_per_frame, replace=False))
        crops.append(ids)
    noisy = [_noisy_pose(spec, pose, f) for f, pose in enumerate(path)]

    stride = spec.frames_per_session - spec.overlap_frames
    sessions = []
    transforms = []
    session_frames = []
    for k in range(spec.session_count):
        frames = tuple(range(k * stride, k * stride + spec.frames_per_session))
        world_to_vggt = _session_transform(spec, k)

        vggt_poses = [world_to_vggt.transform_pose(noisy[f]) for f in frames]
        if k == spec.outlier_session:
            pivot = vggt_poses[spec.overlap_frames - 1].translation
            shrink = 1.0 - spec.outlier_drift
            vggt_poses = vggt_poses[: spec.overlap_frames] + [
                PoseSE3(rotation=p.rotation, translation=pivot + shrink * (p.translation - pivot))
                for p in vggt_poses[spec.overlap_frames:]
            ]

        pieces = []
        for i, f in enumerate(frames):
            world = scene_pts[crops[f]]
            observed = world_to_vggt.apply(noisy[f].apply(path[f].inverse().apply(world)))
            color_rng = _stream(spec.seed, _COLOR_NOISE, k, f)
            color = np.clip(
                scene_colors[crops[f]] + color_rng.normal(0.0, spec.color_noise_std, size=(len(world), 3)), 0.0, 1.0
            )
            pieces.append(ColoredPointCloud(positions=observed, colors=color, frame_ids=np.full(len(world), i)))

        trajectory = TimedTrajectory(
            timestamps=np.array(frames, dtype=np.float64) * spec.frame_period,
            poses=tuple(vggt_poses),
        )
        sessions.append(SessionData(session_id=k, cloud=ColoredPointCloud.concatenate(pieces), trajectory=trajectory))
        transforms.append(world_to_vggt.inverse())
        session_frames.append(frames)

    ext_rng = _stream(spec.seed, _EXTRINSICS)
    cam_from_lidar = PoseSE3(
        rotation=Rotation.from_rotvec(ext_rng.normal(0.0, 0.05, size=3)).as_matrix(),
        translation=ext_rng.uniform(-0.2, 0.2, size=3),
    )
    extrinsics = Extrinsics(cam_from_lidar=cam_from_lidar, time_offset=spec.time_offset)

    jitter = _stream(spec.seed, _JITTER).uniform(-spec.timestamp_jitter, spec.timestamp_jitter, size=len(path))
    lidar_times = np.arange(len(path)) * spec.frame_period - spec.time_offset + jitter
    lidar_trajectory = TimedTrajectory(
        timestamps=lidar_times,
        poses=tuple(pose.compose(cam_from_lidar) for pose in path),
    )

    seen = np.zeros(len(scene_pts), dtype=bool)
    for pose in path:
        seen[_in_box(scene_pts, _view_center(pose), spec.view_radius)] = True
    lidar_cloud = ColoredPointCloud(positions=scene_pts[seen], colors=scene_colors[seen])

    truth_ids = np.unique(np.concatenate(crops))
    ground_truth = ColoredPointCloud(positions=scene_pts[truth_ids], colors=scene_colors[truth_ids])

    inputs = FusionInputs(
        sessions=sessions,
        lidar_cloud=lidar_cloud,
        lidar_trajectory=lidar_trajectory,
        extrinsics=extrinsics,
    )
    return SyntheticScene(
        spec=spec,
        inputs=inputs,
        ground_truth=ground_truth,
        frame_poses=tuple(path),
        vggt_to_world=tuple(transforms),
        session_frames=tuple(session_frames),
    )


def write_scene(scene: SyntheticScene, out_dir: Union[str, Path]) -> Path:
    """
    Write every input file, the manifest and the ground-truth sidecar

    Args:
        scene: Generated scene
        out_dir: Output directory

    Returns:
        Path of the written manifest
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for session in scene.inputs.sessions:
        cloud_path = write_ply(session.cloud, out_dir / "sessions" / f"session_{session.session_id}.ply")
        traj_path = write_tum(session.trajectory, out_dir / "sessions" / f"session_{session.session_id}.tum")
        entries.append(SessionEntry(session_id=session.session_id, cloud=cloud_path, trajectory=traj_path))

    manifest = SessionManifest(
        root=out_dir,
        sessions=entries,
        lidar_cloud=write_ply(scene.inputs.lidar_cloud, out_dir / "lidar.ply"),
        lidar_trajectory=write_tum(scene.inputs.lidar_trajectory, out_dir / "lidar.tum"),
        extrinsics=write_extrinsics(scene.inputs.extrinsics, out_dir / "extrinsics.txt"),
    )
    write_ply(scene.ground_truth, out_dir / "ground_truth.ply")
    (out_dir / "ground_truth.json").write_text(json.dumps(scene.sidecar(), indent=2) + "\n")
    manifest_path = write_manifest(manifest, out_dir / "manifest.txt")
    logger.info(f"Synthetic scene written to {out_dir}")
    return manifest_path
