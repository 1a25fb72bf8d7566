import math

import numpy as np
import pytest

from src.engines.features import extract_features
from src.engines.flow_synth import synthesize_flow
from src.engines.renderer import generate_run, quantize_depth, render_depth, render_image
from src.engines.reloc import DEFAULT_N_TH, verify
from src.models.camera import Intrinsics
from src.models.rasters import DepthMap
from src.models.scene import Box, Scene, TrajectorySpec, ValueNoise, check_clearance, default_scene, poses_from_spec
from src.models.se3 import SE3Pose, euler_to_rotation
from src.utils.errors import ConfigError, InputError


@pytest.fixture(scope="module")
def small_run():
    intr = Intrinsics(100.0, 100.0, 80.0, 60.0, 160, 120)
    spec = TrajectorySpec(poses_per_segment=3, laps=1.25)
    return generate_run(spec, default_scene(3, sprites=10), intr), intr, spec


def test_ground_plane_depth_is_analytic(intr):
    depth = render_depth(Scene(), SE3Pose.identity(), intr)
    for row in (70, 90, 119):
        assert depth.values[row, 10] == pytest.approx(1.5 * intr.f_y / (row - intr.c_y))
    # at and above the horizon nothing is hit
    assert not depth.valid[: int(intr.c_y) + 1].any()


def test_box_silhouette(intr):
    scene = Scene(boxes=(Box((-1.0, -1.0, 4.0), (1.0, 1.0, 6.0)),))
    depth = render_depth(scene, SE3Pose.identity(), intr)
    assert depth.values[60, 80] == 4.0
    assert depth.values[60, 100] == 4.0
    assert not depth.valid[60, 110]


def test_camera_facing_away_sees_nothing(intr):
    up = SE3Pose(euler_to_rotation(math.pi / 2, 0.0, 0.0), np.zeros(3))
    assert not render_depth(Scene(), up, intr).valid.any()
    assert np.all(render_image(Scene(), up, intr) == 0.0)


def test_texture_is_bounded_and_seeded():
    pts = np.random.default_rng(0).uniform(-20, 20, (500, 3))
    a = ValueNoise(5)(pts)
    assert np.all((a >= 0) & (a <= 1))
    np.testing.assert_array_equal(a, ValueNoise(5)(pts))
    assert not np.array_equal(a, ValueNoise(6)(pts))


def test_generate_run_shapes_and_manifest(small_run):
    run, intr, spec = small_run
    n = spec.num_poses
    assert n == 16 and spec.poses_per_lap == 12
    assert len(run.depths) == len(run.images) == n
    assert len(run.flows) == len(run.motions) == n - 1
    assert run.images[0].dtype == np.uint8 and run.images[0].shape == intr.shape
    assert run.trajectory[0].allclose(SE3Pose.identity(), atol=1e-12)
    assert run.manifest["frames"] == n and run.manifest["poses_per_lap"] == 12


def test_revisited_pose_renders_identically(small_run):
    run, _, spec = small_run
    lap = spec.poses_per_lap
    np.testing.assert_array_equal(run.depths[0].values, run.depths[lap].values)
    np.testing.assert_array_equal(run.images[2], run.images[lap + 2])


def test_generate_run_is_deterministic_across_threads(small_run):
    run, intr, spec = small_run
    again = generate_run(spec, default_scene(3, sprites=10), intr, threads=3)
    for a, b in zip(run.depths, again.depths):
        np.testing.assert_array_equal(a.values, b.values)
    for a, b in zip(run.images, again.images):
        np.testing.assert_array_equal(a, b)


def test_rendered_flow_follows_recorded_motion(small_run):
    run, intr, _ = small_run
    for k in (0, 4, 13):
        expected = synthesize_flow(run.depths[k], run.motions[k], intr)
        assert run.flows[k].valid.any()
        assert np.count_nonzero(run.flows[k].valid != expected.valid) <= 5
        ok = expected.valid & run.flows[k].valid
        np.testing.assert_allclose(run.flows[k].u[ok], expected.u[ok], atol=1e-6)
        np.testing.assert_allclose(run.flows[k].v[ok], expected.v[ok], atol=1e-6)


def test_quantize_depth():
    depth = DepthMap(np.array([[10.0, 10.001, 300.0, np.nan]]))
    q = quantize_depth(depth, 256.0)
    assert q.values[0, 0] == 10.0 and q.values[0, 1] == 10.0
    assert not q.valid[0, 2] and not q.valid[0, 3]


def test_trajectory_spec_validation():
    with pytest.raises(ConfigError):
        TrajectorySpec(waypoints=((0, 0), (1, 0), (1, 1)))
    with pytest.raises(ConfigError):
        TrajectorySpec(laps=0.5)
    with pytest.raises(ConfigError):
        TrajectorySpec(poses_per_segment=2)
    with pytest.raises(ConfigError):
        Box((0, 0, 0), (1, 0, 1))


def test_clearance_is_checked():
    spec = TrajectorySpec(waypoints=((-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0)))
    with pytest.raises(InputError, match="nearest surface"):
        poses_from_spec(spec, default_scene(0))
    check_clearance(Scene(), poses_from_spec(spec))


def test_rendered_frames_carry_enough_keypoints_for_loop_verification(small_run):
    run, _, spec = small_run
    lap = spec.poses_per_lap
    feats = [extract_features(img) for img in run.images]
    assert min(len(f) for f in feats) >= DEFAULT_N_TH
    cand = verify(feats[2], feats[lap + 2], i=2, j=lap + 2)
    assert cand.passed
    assert cand.matches >= DEFAULT_N_TH
