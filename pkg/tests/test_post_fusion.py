import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from pydantic import ValidationError

from conftest import random_rotation

from colormap_fusion.errors import DegenerateInput, NoCorrespondences
from colormap_fusion.fusion.post_fusion import (
    closed_form_scale,
    compute_lambda,
    estimate_rt_fixed_scale,
    icp_se3,
    regularized_sim3_icp,
    sim3_objective,
)
from colormap_fusion.geometry.transforms import so3_exp
from colormap_fusion.models.geometry import ColoredPointCloud, PoseSE3, TransformSim3
from colormap_fusion.models.schemas import IcpConfig
from colormap_fusion.pipeline.ablation import AblationSpec, run_ablation, run_trial


def _cloud(positions: np.ndarray) -> ColoredPointCloud:
    return ColoredPointCloud(positions=positions, colors=np.full((len(positions), 3), 0.5))


def _textured_blob(rng, n: int = 800) -> np.ndarray:
    """Anisotropic point set with enough structure to pin down a similarity"""
    return rng.normal(size=(n, 3)) * np.array([2.0, 1.0, 0.5])


def test_compute_lambda():
    """Test the regularization weight β·n·D²"""
    assert compute_lambda(100, 2.0, 0.5) == pytest.approx(200.0)
    assert compute_lambda(100, 2.0, 0.0) == 0.0
    with pytest.raises(ValueError):
        compute_lambda(10, 1.0, 1.5)


@settings(max_examples=200, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    lam=st.floats(0.0, 1e6),
    anchor=st.floats(0.1, 10.0),
)
def test_closed_form_scale_is_convex_combination(seed, lam, anchor):
    """Test the regularized scale blends least squares and anchor"""
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(20, 3))
    q = rng.normal(size=(20, 3))
    rotation = random_rotation(rng)
    translation = rng.normal(size=3)

    rotated = p @ rotation.T
    b = float(np.sum(rotated * rotated))
    s_ls = float(np.sum((q - translation) * rotated)) / b
    expected = (b * s_ls + lam * anchor) / (b + lam)

    scale = closed_form_scale(p, q, rotation, translation, lam, anchor)
    assert scale == pytest.approx(expected, rel=1e-12, abs=1e-12)
    assert min(s_ls, anchor) - 1e-12 <= scale <= max(s_ls, anchor) + 1e-12


def test_closed_form_scale_limits(rng):
    """Test λ = 0 gives least squares and a huge λ gives the anchor"""
    p = rng.normal(size=(30, 3))
    rotation = random_rotation(rng)
    q = 1.7 * p @ rotation.T + 0.3

    assert closed_form_scale(p, q, rotation, np.full(3, 0.3), 0.0, 5.0) == pytest.approx(1.7, rel=1e-12)
    assert closed_form_scale(p, q, rotation, np.full(3, 0.3), 1e18, 5.0) == pytest.approx(5.0, abs=1e-9)

    with pytest.raises(DegenerateInput):
        closed_form_scale(np.zeros((3, 3)), q[:3], rotation, np.zeros(3), 0.0, 1.0)


def test_estimate_rt_fixed_scale(rng):
    """Test Procrustes recovery for a known scale"""
    p = rng.normal(size=(50, 3))
    rotation = random_rotation(rng)
    translation = rng.normal(size=3)
    q = 2.0 * p @ rotation.T + translation

    got_r, got_t = estimate_rt_fixed_scale(p, q, 2.0)
    assert np.allclose(got_r, rotation, atol=1e-10)
    assert np.allclose(got_t, translation, atol=1e-10)

    with pytest.raises(DegenerateInput):
        estimate_rt_fixed_scale(p[:2], q[:2], 2.0)


def test_sim3_objective_penalty(rng):
    """Test the objective adds λ(s − anchor)² to the residual"""
    p = rng.normal(size=(10, 3))
    transform = TransformSim3(scale=2.0, rotation=np.eye(3), translation=np.zeros(3))
    assert sim3_objective(p, 2.0 * p, transform, 3.0, 1.0) == pytest.approx(3.0)


def test_icp_config_bounds():
    """Test beta must lie in [0, 1]"""
    assert IcpConfig(beta=0.0).beta == 0.0
    with pytest.raises(ValidationError):
        IcpConfig(beta=1.5)


def test_regularized_icp_recovers_perturbed_similarity(rng):
    """Test Sim(3) ICP from a nearby initial guess"""
    src = _textured_blob(rng)
    truth = TransformSim3(scale=1.4, rotation=random_rotation(rng), translation=rng.normal(size=3))
    tgt = truth.apply(src)
    init = TransformSim3(
        scale=1.4 * 1.03,
        rotation=truth.rotation,
        translation=truth.translation + np.array([0.05, -0.03, 0.02]),
    )

    result = regularized_sim3_icp(_cloud(src), _cloud(tgt), init, IcpConfig(beta=0.0, max_iterations=200))

    assert result.converged
    assert result.transform.scale == pytest.approx(1.4, rel=1e-3)
    assert result.lambda_ == 0.0
    assert result.final_objective == pytest.approx(result.objective_history[-1])


def test_regularized_icp_recovers_scale_with_anchor(rng):
    """Test β = 0.1 anchored at the true scale recovers it from 10% scale and 5° rotation error"""
    src = _textured_blob(rng, 1500)
    truth = TransformSim3(scale=1.2, rotation=random_rotation(rng), translation=rng.normal(size=3))
    axis = rng.normal(size=3)
    tilt = so3_exp(np.deg2rad(5.0) * axis / np.linalg.norm(axis))
    init = TransformSim3(scale=1.2 * 1.1, rotation=truth.rotation @ tilt, translation=truth.translation)

    cfg = IcpConfig(beta=0.1, anchor_scale=1.2, max_iterations=200)
    result = regularized_sim3_icp(_cloud(src), _cloud(truth.apply(src)), init, cfg)

    assert result.transform.scale == pytest.approx(1.2, rel=0.005)
    assert result.lambda_ > 0.0


def test_regularized_icp_objective_decreases(rng):
    """Test every alternation step lowers the regularized objective"""
    src = _textured_blob(rng, 500)
    truth = TransformSim3(scale=0.8, rotation=np.eye(3), translation=np.array([0.2, 0.0, 0.0]))
    tgt = truth.apply(src) + rng.normal(scale=0.01, size=src.shape)
    init = TransformSim3(scale=0.85, rotation=np.eye(3), translation=np.zeros(3))

    result = regularized_sim3_icp(_cloud(src), _cloud(tgt), init, IcpConfig(beta=0.2, anchor_scale=0.85))

    history = np.array(result.objective_history)
    assert np.all(np.diff(history) <= 1e-9 * history[0])
    assert result.lambda_ > 0.0
    assert result.iterations_used == len(result.objective_history)
    assert result.transform.scale > 0.0


def test_regularized_icp_identical_clouds(rng):
    """Test identity is a fixed point on identical clouds"""
    src = _textured_blob(rng, 200)
    result = regularized_sim3_icp(_cloud(src), _cloud(src), TransformSim3.identity(), IcpConfig(beta=0.5))

    assert result.converged
    assert result.iterations_used == 1
    assert result.final_objective == pytest.approx(0.0, abs=1e-18)
    assert result.transform.scale == pytest.approx(1.0, abs=1e-12)


def test_regularized_icp_errors(rng):
    """Test too few points and out-of-range correspondences"""
    src = _textured_blob(rng, 50)
    with pytest.raises(DegenerateInput):
        regularized_sim3_icp(_cloud(src[:5]), _cloud(src), TransformSim3.identity())

    far = TransformSim3(scale=1.0, rotation=np.eye(3), translation=np.full(3, 100.0))
    with pytest.raises(NoCorrespondences):
        regularized_sim3_icp(_cloud(src), _cloud(src), far, IcpConfig(max_correspondence_distance=0.5))


def test_icp_se3_recovers_small_motion(rng):
    """Test rigid ICP reports the pose and full fitness"""
    src = _textured_blob(rng, 600)
    axis = rng.normal(size=3)
    truth = PoseSE3(rotation=so3_exp(0.02 * axis / np.linalg.norm(axis)), translation=np.array([0.03, -0.02, 0.01]))

    pose, fitness = icp_se3(_cloud(src), _cloud(truth.apply(src)), cfg=IcpConfig(max_iterations=100))

    assert fitness == pytest.approx(1.0)
    assert np.allclose(pose.translation, truth.translation, atol=1e-4)
    assert np.allclose(pose.rotation, truth.rotation, atol=1e-4)


@pytest.mark.slow
def test_regularization_ablation():
    """Test the anchored scale beats the unregularized one on cropped corridors"""
    report = run_ablation(AblationSpec(trials=20, seed=0))

    assert report.regularization_wins >= 0.95
    assert report.regularized_within_tolerance >= 0.9
    assert report.unregularized_distorted >= 0.9
    assert report.summary()["mean_unregularized_error"] > 0.05


def test_ablation_trial_shares_initial_scale():
    """Test a trial perturbs the scale by exactly the configured amount"""
    spec = AblationSpec(trials=1, target_points=2000, source_points=400)
    trial = run_trial(spec, 0)

    assert abs(trial.initial_scale - 1.0) == pytest.approx(0.05)
    assert trial.regularized_error < 0.02


def test_unregularized_scale_shrinks_under_depth_noise():
    """Test β = 0 settles near w² / (w² + var) from a perturbed start"""
    spec = AblationSpec(trials=1, target_points=2000, source_points=600)
    noise_var = spec.depth_noise**2 / 3.0
    expected = spec.half_width**2 / (spec.half_width**2 + noise_var)

    for trial in range(4):
        result = run_trial(spec, trial)
        assert result.unregularized_error > 0.05
        assert result.unregularized_scale == pytest.approx(expected, abs=0.03)
        assert result.regularized_error < result.unregularized_error

    noiseless = run_trial(spec.model_copy(update={"depth_noise": 0.0}), 0)
    assert noiseless.unregularized_error < 0.01


def test_ablation_spec_validation():
    """Test betas must be ordered and depth noise must stay inside the corridor"""
    with pytest.raises(ValidationError):
        AblationSpec(unregularized_beta=0.5, regularized_beta=0.5)
    with pytest.raises(ValidationError):
        AblationSpec(depth_noise=0.6)
