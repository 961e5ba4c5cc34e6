import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

# Add the package root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from colormap_fusion.models.geometry import ColoredPointCloud, PoseSE3, TimedTrajectory, TransformSim3
from colormap_fusion.models.schemas import SyntheticSceneSpec
from colormap_fusion.pipeline.synthetic import generate_synthetic_scene


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return Rotation.from_quat(rng.normal(size=4)).as_matrix()


def random_sim3(rng: np.random.Generator, low: float = 0.1, high: float = 10.0) -> TransformSim3:
    return TransformSim3(
        scale=rng.uniform(low, high),
        rotation=random_rotation(rng),
        translation=rng.uniform(-10.0, 10.0, size=3),
    )


def random_cloud(rng: np.random.Generator, n: int, extent: float = 5.0) -> ColoredPointCloud:
    return ColoredPointCloud(positions=rng.uniform(-extent, extent, size=(n, 3)), colors=rng.uniform(size=(n, 3)))


def curved_trajectory(n: int = 20, period: float = 0.1, start: float = 0.0) -> TimedTrajectory:
    """Planar arc with heading along the tangent"""
    angles = np.linspace(0.0, 1.5 * np.pi, n)
    positions = np.column_stack([4.0 * np.cos(angles), 4.0 * np.sin(angles), 0.1 * angles])
    rotations = Rotation.from_euler("z", angles + np.pi / 2).as_matrix()
    return TimedTrajectory(
        timestamps=start + np.arange(n) * period,
        poses=tuple(PoseSE3(rotation=rotations[i], translation=positions[i]) for i in range(n)),
    )


@pytest.fixture
def rng():
    """Fixture for a seeded random generator"""
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_spec():
    """Fixture for a reduced synthetic scene with noise and one scale outlier"""
    return SyntheticSceneSpec(
        seed=3,
        session_count=3,
        frames_per_session=12,
        overlap_frames=4,
        points_per_frame=600,
        point_spacing=0.15,
    )


@pytest.fixture(scope="session")
def small_scene(small_spec):
    """Fixture for the generated reduced scene"""
    return generate_synthetic_scene(small_spec)


@pytest.fixture(scope="session")
def clean_scene():
    """Fixture for a noiseless scene whose sessions equal the ground truth up to similarity"""
    spec = SyntheticSceneSpec(
        seed=5,
        session_count=3,
        frames_per_session=10,
        overlap_frames=3,
        points_per_frame=500,
        point_spacing=0.15,
        scale_range=(1.0, 1.0),
        pose_noise_trans=0.0,
        pose_noise_rot=0.0,
        color_noise_std=0.0,
        crop_fraction=1.0,
        timestamp_jitter=0.0,
        outlier_session=None,
    )
    return generate_synthetic_scene(spec)
