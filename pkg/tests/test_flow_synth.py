import numpy as np
import pytest
from scipy import stats

from src.engines.flow_synth import (
    depth_to_pointcloud,
    generate_training_batch,
    generate_training_pair,
    synthesize_flow,
    transform_pointcloud,
)
from src.models.camera import Intrinsics, project
from src.models.motion_model import MotionModel, StudentTMarginal
from src.models.rasters import DepthMap
from src.models.se3 import Motion6DoF, compose, motion_to_se3, se3_to_motion
from src.utils.errors import InputError
from tests.conftest import random_motion


@pytest.fixture
def model():
    m = [StudentTMarginal(4.0, 0.0, 0.05)] * 2 + [StudentTMarginal(4.0, 0.5, 0.05)] + [StudentTMarginal(4.0, 0.0, 0.005)] * 3
    return MotionModel(tuple(m))


def test_pointcloud_from_plane(plane_depth, intr):
    cloud = depth_to_pointcloud(plane_depth, intr)
    assert cloud.valid.all()
    np.testing.assert_allclose(cloud.points[..., 2], 10.0)
    assert cloud.points[..., 0].min() < 0 < cloud.points[..., 0].max()
    proj = project(cloud.points, intr)
    u, v = intr.pixel_grid()
    np.testing.assert_allclose(proj.u, u, atol=1e-9)
    np.testing.assert_allclose(proj.v, v, atol=1e-9)


def test_pointcloud_all_invalid(intr):
    cloud = depth_to_pointcloud(DepthMap(np.full(intr.shape, np.nan)), intr)
    assert not cloud.valid.any()


def test_dimension_mismatch(intr):
    with pytest.raises(InputError):
        depth_to_pointcloud(DepthMap.constant(1.0, 10, 10), intr)


def test_transform_pointcloud(plane_depth, intr, rng):
    cloud = depth_to_pointcloud(plane_depth, intr)
    same = transform_pointcloud(cloud, Motion6DoF())
    np.testing.assert_array_equal(same.points, cloud.points)
    shifted = transform_pointcloud(cloud, Motion6DoF(t_x=1.0))
    np.testing.assert_allclose(shifted.points - cloud.points, np.broadcast_to([1.0, 0.0, 0.0], cloud.points.shape))

    moved = transform_pointcloud(cloud, random_motion(rng))
    a, b = cloud.points.reshape(-1, 3), moved.points.reshape(-1, 3)
    idx = rng.integers(len(a), size=(200, 2))
    d0 = np.linalg.norm(a[idx[:, 0]] - a[idx[:, 1]], axis=1)
    d1 = np.linalg.norm(b[idx[:, 0]] - b[idx[:, 1]], axis=1)
    np.testing.assert_allclose(d0, d1, atol=1e-9)


def test_identity_motion_gives_zero_flow(slanted_depth, intr):
    flow = synthesize_flow(slanted_depth, Motion6DoF(), intr)
    assert flow.valid.all()
    np.testing.assert_allclose(flow.u, 0.0, atol=1e-9)
    np.testing.assert_allclose(flow.v, 0.0, atol=1e-9)


@pytest.mark.parametrize("z", [0.37, 1.1, 6.3, 17.9, 79.3])
def test_identity_motion_keeps_border_pixels(intr, z):
    flow = synthesize_flow(DepthMap(np.full(intr.shape, z)), Motion6DoF(), intr)
    assert flow.valid[:, 0].all() and flow.valid[0, :].all()
    assert np.isfinite(flow.u).all()


def test_lateral_translation_on_plane(plane_depth, intr):
    flow = synthesize_flow(plane_depth, Motion6DoF(t_x=1.0), intr)
    ok = flow.valid
    # the right-most 10 columns leave the image
    assert not ok[:, -10:].any()
    assert ok[:, :-10].all()
    np.testing.assert_allclose(flow.u[ok], 10.0, atol=1e-9)
    np.testing.assert_allclose(flow.v[ok], 0.0, atol=1e-9)


def test_forward_motion_fixes_principal_point(plane_depth, intr):
    flow = synthesize_flow(plane_depth, Motion6DoF(t_z=-1.0), intr)
    r, c = int(intr.c_y), int(intr.c_x)
    assert flow.u[r, c] == 0.0 and flow.v[r, c] == 0.0


def test_flow_composition_on_plane(plane_depth, intr):
    m1 = Motion6DoF(0.1, -0.05, 0.2, 0.0, 0.0, 0.0)
    m2 = Motion6DoF(-0.04, 0.02, 0.1, 0.0, 0.0, 0.0)
    composed = se3_to_motion(compose(motion_to_se3(m2), motion_to_se3(m1)))
    flow = synthesize_flow(plane_depth, composed, intr)
    # pure translations on a fronto-parallel plane: u' = c_x + f (x + tx) / (z + tz)
    u, v = intr.pixel_grid()
    t = m1.translation + m2.translation
    x = (u - intr.c_x) * 10.0 / intr.f_x
    y = (v - intr.c_y) * 10.0 / intr.f_y
    expect_u = intr.c_x + intr.f_x * (x + t[0]) / (10.0 + t[2]) - u
    expect_v = intr.c_y + intr.f_y * (y + t[1]) / (10.0 + t[2]) - v
    ok = flow.valid
    np.testing.assert_allclose(flow.u[ok], expect_u[ok], atol=1e-6)
    np.testing.assert_allclose(flow.v[ok], expect_v[ok], atol=1e-6)


def test_points_behind_camera_are_invalid(intr):
    flow = synthesize_flow(DepthMap.constant(0.5, intr.width, intr.height), Motion6DoF(t_z=-1.0), intr)
    assert not flow.valid.any()


def test_training_pair_is_deterministic(slanted_depth, intr, model):
    f1, m1 = generate_training_pair(slanted_depth, model, np.random.default_rng(7), intr)
    f2, m2 = generate_training_pair(slanted_depth, model, np.random.default_rng(7), intr)
    assert m1 == m2
    np.testing.assert_array_equal(f1.u, f2.u)
    np.testing.assert_array_equal(f1.valid, f2.valid)


def test_training_pair_on_invalid_depth(intr, model):
    flow, motion = generate_training_pair(DepthMap(np.full(intr.shape, np.nan)), model, np.random.default_rng(0), intr)
    assert not flow.valid.any()
    assert isinstance(motion, Motion6DoF)


def test_batch_independent_of_threads(plane_depth, slanted_depth, intr, model):
    a = generate_training_batch([plane_depth, slanted_depth], model, 11, 12, intr, threads=1)
    b = generate_training_batch([plane_depth, slanted_depth], model, 11, 12, intr, threads=4)
    assert [s.motion for s in a] == [s.motion for s in b]
    assert [s.depth_index for s in a] == [s.depth_index for s in b]
    assert all(np.array_equal(x.flow.valid, y.flow.valid) for x, y in zip(a, b))
    assert [s.index for s in a] == list(range(12))


def test_batch_edge_cases(intr, model):
    assert generate_training_batch([], model, 0, 0, intr) == []
    with pytest.raises(InputError):
        generate_training_batch([], model, 0, 3, intr)
    with pytest.raises(InputError):
        generate_training_batch([], model, 0, -1, intr)


def test_training_pair_motions_follow_the_marginals(model):
    small = Intrinsics(8.0, 8.0, 4.0, 4.0, 8, 8)
    depth = DepthMap.constant(5.0, small.width, small.height)
    rng = np.random.default_rng(2024)
    draws = np.array([generate_training_pair(depth, model, rng, small)[1].as_array() for _ in range(1000)])
    for column, marginal in zip(draws.T, model.marginals):
        cdf = stats.t(marginal.nu, loc=marginal.loc, scale=marginal.scale).cdf
        assert stats.kstest(column, cdf).pvalue > 0.01
