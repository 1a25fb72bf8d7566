import numpy as np
import pytest

from src.engines.flow_synth import synthesize_flow
from src.engines.vo_estimator import (
    CONSECUTIVE,
    LOOP,
    EstimatorConfig,
    EstimatorPolicy,
    ExternalPredictions,
    MotionEstimate,
    PairEstimator,
    estimate_motion,
    load_external_motions,
    save_external_motions,
    select_estimator,
)
from src.models.rasters import DepthMap, FlowField
from src.models.se3 import Motion6DoF
from src.models.uncertainty import HyperParams, SigmaParams, covariance_q
from src.utils.errors import ConfigError, FormatError, InputError
from tests.conftest import random_motion

EXACT = EstimatorConfig(max_iterations=100, tolerance=1e-14, stride=1)


def test_round_trip_recovers_motion(slanted_depth, intr, rng):
    for _ in range(10):
        m = random_motion(rng, t=0.2, r=0.03)
        est = estimate_motion(synthesize_flow(slanted_depth, m, intr), slanted_depth, intr, EXACT)
        np.testing.assert_allclose(est.motion.translation, m.translation, atol=1e-6)
        np.testing.assert_allclose(est.motion.angles, m.angles, atol=1e-8)
        assert est.converged
        assert est.residual_rms < 1e-6


def test_zero_flow_gives_identity(plane_depth, intr):
    est = estimate_motion(FlowField.zeros(intr.width, intr.height), plane_depth, intr)
    np.testing.assert_allclose(est.motion.as_array(), 0.0, atol=1e-12)
    assert est.residual_rms < 1e-9
    assert est.inlier_fraction == 1.0


def test_noisy_flow_translation_error(plane_depth, intr):
    m = Motion6DoF(0.1, 0.0, 0.5, 0.0, 0.01, 0.0)
    clean = synthesize_flow(plane_depth, m, intr)
    errors = []
    for k in range(100):
        noise = np.random.default_rng(k).normal(0.0, 0.5, (2,) + intr.shape)
        flow = FlowField(clean.u + noise[0], clean.v + noise[1], clean.valid)
        est = estimate_motion(flow, plane_depth, intr, EstimatorConfig(stride=2))
        errors.append(np.linalg.norm(est.motion.translation - m.translation))
    assert np.median(errors) < 0.02


def test_covariance_is_symmetric_psd(slanted_depth, intr):
    m = Motion6DoF(0.05, 0.0, 0.3, 0.0, 0.02, 0.0)
    clean = synthesize_flow(slanted_depth, m, intr)
    noise = np.random.default_rng(0).normal(0.0, 0.3, (2,) + intr.shape)
    est = estimate_motion(FlowField(clean.u + noise[0], clean.v + noise[1], clean.valid), slanted_depth, intr)
    C = est.covariance
    np.testing.assert_allclose(C, C.T, atol=1e-12)
    assert np.linalg.eigvalsh(C)[0] > -1e-12
    assert np.all(np.diag(C) > 0)


def test_too_few_valid_pixels(intr):
    depth = np.full(intr.shape, np.nan)
    depth[:5, :5] = 3.0
    with pytest.raises(InputError):
        estimate_motion(FlowField.zeros(intr.width, intr.height), DepthMap(depth), intr)


def test_dimension_mismatch(plane_depth, intr):
    with pytest.raises(InputError):
        estimate_motion(FlowField.zeros(10, 10), plane_depth, intr)


def test_non_convergence_is_flagged_not_raised(slanted_depth, intr):
    m = Motion6DoF(0.2, 0.1, 0.3, 0.02, 0.03, 0.01)
    est = estimate_motion(synthesize_flow(slanted_depth, m, intr), slanted_depth, intr, EstimatorConfig(max_iterations=1, tolerance=1e-14))
    assert not est.converged
    assert est.iterations == 1


def test_estimator_config_validation():
    with pytest.raises(ConfigError):
        EstimatorConfig(max_iterations=0)
    with pytest.raises(ConfigError):
        EstimatorConfig(tolerance=0.0)
    with pytest.raises(ConfigError):
        EstimatorConfig(stride=0)


def test_motion_estimate_rejects_bad_covariance():
    with pytest.raises(InputError):
        MotionEstimate(Motion6DoF(), np.diag([1, 1, 1, 1, 1, -1.0]))
    bad = np.eye(6)
    bad[0, 1] = 1.0
    with pytest.raises(InputError):
        MotionEstimate(Motion6DoF(), bad)


def test_select_estimator_boundaries():
    policy = EstimatorPolicy(t_loop=50)
    assert select_estimator(policy, 1) == CONSECUTIVE
    assert select_estimator(policy, 50) == CONSECUTIVE
    assert select_estimator(policy, 60) == LOOP
    with pytest.raises(InputError):
        select_estimator(policy, 0)
    with pytest.raises(ConfigError):
        EstimatorPolicy(t_loop=0)


def test_external_predictions_round_trip(tmp_path):
    ests = [
        MotionEstimate(Motion6DoF(0.1, 0.2, 0.3, 0.01, 0.02, 0.03), np.diag(np.arange(1.0, 7.0)) * 1e-4, frames=(0, 1)),
        MotionEstimate(Motion6DoF(-0.1, 0.0, 1.0 / 3.0, 0.0, 0.0, 0.0), np.eye(6) * 1e-3, frames=(1, 2)),
    ]
    path = tmp_path / "motions.txt"
    save_external_motions(path, ests)
    back = load_external_motions(path)
    assert len(back) == 2
    for a, b in zip(ests, back):
        assert a.motion == b.motion
        assert a.frames == b.frames
        np.testing.assert_array_equal(a.covariance, b.covariance)


def test_external_predictions_default_covariance(tmp_path):
    path = tmp_path / "motions.txt"
    path.write_text("# i j motion\n0 1 0 0 1 0 0 0\n")
    sig, hp = SigmaParams(), HyperParams(10000.0, 0.004)
    (est,) = load_external_motions(path, sig, hp)
    np.testing.assert_array_equal(est.covariance, covariance_q(sig, hp))


def test_external_predictions_empty_and_errors(tmp_path):
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    assert load_external_motions(empty) == []
    bad = tmp_path / "bad.txt"
    bad.write_text("0 1 0 0 1\n")
    with pytest.raises(FormatError, match=r"bad.txt:1"):
        load_external_motions(bad)
    with pytest.raises(FileNotFoundError):
        load_external_motions(tmp_path / "missing.txt")


def test_pair_estimator_routes_by_gap(tmp_path, plane_depth, intr):
    path = tmp_path / "loops.txt"
    path.write_text("0 60 0 0 0.5 0 0 0\n")
    policy = EstimatorPolicy(EstimatorConfig(), ExternalPredictions(path), t_loop=50)
    pe = PairEstimator(policy, intr)
    assert pe.needs_flow(0, 1)
    assert not pe.needs_flow(0, 60)
    assert pe.estimate(0, 60).motion.t_z == 0.5
    with pytest.raises(InputError):
        pe.estimate(1, 61)
    with pytest.raises(InputError):
        pe.estimate(0, 1)
    m = Motion6DoF(t_z=0.2)
    est = pe.estimate(0, 1, synthesize_flow(plane_depth, m, intr), plane_depth)
    assert est.frames == (0, 1)
    assert est.motion.t_z == pytest.approx(0.2, abs=1e-6)


LEAST_SQUARES = EstimatorConfig(max_iterations=100, tolerance=1e-14, huber_scale=1e6, stride=1)


def _noisy_flow(depth, intr, motion, noise_u, noise_v, k):
    clean = synthesize_flow(depth, motion, intr)
    return FlowField(clean.u + k * noise_u, clean.v + k * noise_v, clean.valid)


def test_covariance_scales_with_flow_noise_squared(slanted_depth, intr):
    rng = np.random.default_rng(11)
    noise_u, noise_v = rng.normal(0.0, 0.05, intr.shape), rng.normal(0.0, 0.05, intr.shape)
    m = Motion6DoF(0.05, -0.02, 0.2, 0.01, -0.02, 0.005)
    base = estimate_motion(_noisy_flow(slanted_depth, intr, m, noise_u, noise_v, 1.0), slanted_depth, intr, LEAST_SQUARES)
    for k in (2.0, 4.0):
        est = estimate_motion(_noisy_flow(slanted_depth, intr, m, noise_u, noise_v, k), slanted_depth, intr, LEAST_SQUARES)
        assert np.trace(est.covariance) / np.trace(base.covariance) == pytest.approx(k * k, rel=0.02)
        np.testing.assert_allclose(np.diag(est.covariance), k * k * np.diag(base.covariance), rtol=0.05)
        assert est.residual_rms == pytest.approx(k * base.residual_rms, rel=0.02)


def test_objective_never_increases_over_iterations(slanted_depth, intr):
    rng = np.random.default_rng(12)
    m = Motion6DoF(0.15, -0.1, 0.3, 0.04, -0.03, 0.02)
    flow = _noisy_flow(slanted_depth, intr, m, rng.normal(0.0, 0.1, intr.shape), rng.normal(0.0, 0.1, intr.shape), 1.0)
    rms = []
    for n in range(1, 9):
        cfg = EstimatorConfig(max_iterations=n, tolerance=1e-14, huber_scale=1e6, stride=1)
        rms.append(estimate_motion(flow, slanted_depth, intr, cfg).residual_rms)
    # all weights are 1, so the objective is half the sum of squared residual norms
    assert all(b <= a * (1 + 1e-12) for a, b in zip(rms, rms[1:]))
    at_zero = float(np.sqrt(np.mean(flow.u[flow.valid] ** 2 + flow.v[flow.valid] ** 2)))
    assert rms[0] < at_zero
    assert rms[-1] < 0.2 < at_zero
