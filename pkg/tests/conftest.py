import numpy as np
import pytest

from src.models.camera import Intrinsics
from src.models.rasters import DepthMap
from src.models.se3 import Motion6DoF, SE3Pose, euler_to_rotation
from src.models.trajectory import Trajectory


@pytest.fixture
def intr():
    return Intrinsics(100.0, 100.0, 80.0, 60.0, 160, 120)


@pytest.fixture
def plane_depth(intr):
    return DepthMap.constant(10.0, intr.width, intr.height)


@pytest.fixture
def slanted_depth(intr):
    """Ground-like depth: farther towards the top of the image, never invalid."""
    _, v = intr.pixel_grid()
    return DepthMap(6.0 + 4.0 * (intr.height - v) / intr.height)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_motion(rng, t=0.3, r=0.05) -> Motion6DoF:
    return Motion6DoF(*rng.uniform(-t, t, 3), *rng.uniform(-r, r, 3))


def random_trajectory(rng, n=30, step=1.0) -> Trajectory:
    poses = [SE3Pose.identity()]
    for _ in range(n - 1):
        R = euler_to_rotation(*rng.normal(0.0, 0.02, 3))
        rel = SE3Pose(R, np.array([0.0, 0.0, step]) + rng.normal(0.0, 0.05, 3))
        poses.append(poses[-1] @ rel)
    return Trajectory.from_poses(poses)


def straight_line(n, step=1.0, scale=1.0) -> Trajectory:
    return Trajectory.from_poses([SE3Pose(np.eye(3), np.array([0.0, 0.0, k * step * scale])) for k in range(n)])
