import json

import numpy as np
import pytest
from pydantic import ValidationError

from colormap_fusion.fusion.pre_fusion import lidar_to_camera_trajectory
from colormap_fusion.geometry.spatial_index import SpatialIndex
from colormap_fusion.models.schemas import SyntheticSceneSpec
from colormap_fusion.pipeline.synthetic import camera_path, generate_synthetic_scene, write_scene


def test_spec_validation():
    """Test overlap, outlier and jitter constraints"""
    with pytest.raises(ValidationError):
        SyntheticSceneSpec(frames_per_session=5, overlap_frames=5)
    with pytest.raises(ValidationError):
        SyntheticSceneSpec(outlier_session=0)
    with pytest.raises(ValidationError):
        SyntheticSceneSpec(crop_fraction=0.0)
    with pytest.raises(ValidationError):
        SyntheticSceneSpec(timestamp_jitter=0.06)

    spec = SyntheticSceneSpec()
    assert spec.total_frames == 4 * 20 - 3 * 5


def test_camera_path_is_deterministic(small_spec):
    """Test the camera path depends only on the scene settings"""
    a = camera_path(small_spec)
    b = camera_path(small_spec)
    assert len(a) == small_spec.total_frames
    assert all(np.array_equal(p.as_matrix(), q.as_matrix()) for p, q in zip(a, b))


def test_sessions_share_overlap_frames(small_scene, small_spec):
    """Test consecutive sessions share their boundary frames and timestamps"""
    stride = small_spec.frames_per_session - small_spec.overlap_frames
    for k in range(small_spec.session_count - 1):
        older, newer = small_scene.session_frames[k], small_scene.session_frames[k + 1]
        assert older[stride:] == newer[: small_spec.overlap_frames]
        assert np.allclose(
            small_scene.inputs.sessions[k].trajectory.timestamps[stride:],
            small_scene.inputs.sessions[k + 1].trajectory.timestamps[: small_spec.overlap_frames],
        )


def test_sidecar_transforms_reproduce_ground_truth(clean_scene):
    """Test sidecar transforms map noiseless session clouds onto ground-truth points"""
    index = SpatialIndex(clean_scene.ground_truth.positions)
    for session, to_world in zip(clean_scene.inputs.sessions, clean_scene.vggt_to_world):
        _, dists = index.nearest_many(to_world.apply(session.cloud.positions))
        assert dists.max() < 1e-8


def test_sidecar_poses_reproduce_session_trajectories(clean_scene):
    """Test sidecar transforms map noiseless session poses onto the camera path"""
    for session, frames, to_world in zip(
        clean_scene.inputs.sessions, clean_scene.session_frames, clean_scene.vggt_to_world
    ):
        for pose, frame in zip(session.trajectory.poses, frames):
            expected = clean_scene.frame_poses[frame]
            assert np.allclose(to_world.transform_pose(pose).as_matrix(), expected.as_matrix(), atol=1e-9)


def test_noisy_session_stays_near_ground_truth(small_scene):
    """Test degraded clouds land near ground truth once mapped with the sidecar"""
    index = SpatialIndex(small_scene.ground_truth.positions)
    for session, to_world in zip(small_scene.inputs.sessions, small_scene.vggt_to_world):
        _, dists = index.nearest_many(to_world.apply(session.cloud.positions))
        assert np.median(dists) < 0.05
        assert dists.max() < 0.3


def test_lidar_products_match_camera_path(clean_scene):
    """Test the LiDAR trajectory converts back to the camera path"""
    cam = lidar_to_camera_trajectory(clean_scene.inputs.lidar_trajectory, clean_scene.inputs.extrinsics)
    spec = clean_scene.spec

    assert np.allclose(cam.timestamps, np.arange(spec.total_frames) * spec.frame_period, atol=1e-12)
    for got, want in zip(cam.poses, clean_scene.frame_poses):
        assert np.allclose(got.as_matrix(), want.as_matrix(), atol=1e-12)
    assert len(clean_scene.inputs.lidar_cloud) >= len(clean_scene.ground_truth)


def test_outlier_session_trajectory_is_shrunk(small_scene, small_spec):
    """Test only the outlier session's trajectory drifts after its overlap frames"""
    k = small_spec.outlier_session
    session = small_scene.inputs.sessions[k]
    to_world = small_scene.vggt_to_world[k]
    drifted = [
        np.linalg.norm(to_world.transform_pose(p).translation - small_scene.frame_poses[f].translation)
        for p, f in zip(session.trajectory.poses, small_scene.session_frames[k])
    ]
    assert max(drifted[: small_spec.overlap_frames]) < 0.1
    assert drifted[-1] > 0.5


def test_generation_and_files_are_deterministic(tmp_path, small_spec):
    """Test two generations with one seed write byte-identical files"""
    first = write_scene(generate_synthetic_scene(small_spec), tmp_path / "a").parent
    second = write_scene(generate_synthetic_scene(small_spec), tmp_path / "b").parent

    names = sorted(p.relative_to(first).as_posix() for p in first.rglob("*") if p.is_file())
    assert "manifest.txt" in names
    assert "ground_truth.json" in names
    assert "sessions/session_0.ply" in names
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_sidecar_records_applied_scales(tmp_path):
    """Test a wide scale range is recorded exactly as applied"""
    spec = SyntheticSceneSpec(
        seed=11,
        session_count=3,
        frames_per_session=8,
        overlap_frames=3,
        points_per_frame=200,
        point_spacing=0.2,
        scale_range=(0.2, 5.0),
        outlier_session=None,
    )
    scene = generate_synthetic_scene(spec)
    sidecar = json.loads((write_scene(scene, tmp_path).parent / "ground_truth.json").read_text())

    recorded = [entry["scale"] for entry in sidecar["vggt_to_world"]]
    assert recorded == [t.scale for t in scene.vggt_to_world]
    assert all(0.2 <= 1.0 / s <= 5.0 for s in recorded)
    assert sidecar["session_frames"][1][0] == 5
