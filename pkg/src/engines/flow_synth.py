"""
Synthetic Optical Flow
======================
Given one real depth map and a 6DoF motion, synthesize the dense flow a
displaced virtual camera would observe:

1. back-project every valid depth pixel into a point cloud,
2. move the cloud with the motion (as an SE3 matrix),
3. re-project the moved cloud onto the image plane,
4. flow = re-projection - regular pixel grid.

Motion convention: the motion acts on points expressed in the source camera
frame, P' = R P + t (the inverse of the camera's own motion). The VO
estimator inverts exactly this mapping.

No z-buffering: flow is defined per source pixel and several source pixels
may land on the same target. Pixels whose re-projection leaves the image
or falls behind the camera are invalid, never clamped.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from src.models.camera import Intrinsics, project
from src.models.motion_model import MotionModel, sample
from src.models.rasters import DepthMap, FlowField, PointCloud
from src.models.se3 import Motion6DoF, SE3Pose, motion_to_se3
from src.utils.errors import InputError

logger = logging.getLogger(__name__)


def _check_dims(depth: DepthMap, intr: Intrinsics) -> None:
    if (depth.height, depth.width) != intr.shape:
        raise InputError(
            f"depth map is {depth.width}x{depth.height} but intrinsics expect {intr.width}x{intr.height}"
        )


def depth_to_pointcloud(depth: DepthMap, intr: Intrinsics) -> PointCloud:
    _check_dims(depth, intr)
    u, v = intr.pixel_grid()
    z = depth.values
    points = np.stack([(u - intr.c_x) * z / intr.f_x, (v - intr.c_y) * z / intr.f_y, z], axis=-1)
    return PointCloud(points, depth.valid)


def transform_pointcloud(cloud: PointCloud, motion: Motion6DoF) -> PointCloud:
    return apply_pose(cloud, motion_to_se3(motion))


def apply_pose(cloud: PointCloud, pose: SE3Pose) -> PointCloud:
    return PointCloud(pose.apply(cloud.points), cloud.valid)


def flow_from_pose(depth: DepthMap, pose: SE3Pose, intr: Intrinsics) -> FlowField:
    """Steps 1-4 with the motion already in matrix form."""
    _check_dims(depth, intr)
    moved = apply_pose(depth_to_pointcloud(depth, intr), pose)
    proj = project(moved.points, intr)
    u, v = intr.pixel_grid()
    valid = moved.valid & proj.in_bounds
    return FlowField(proj.u - u, proj.v - v, valid)


def synthesize_flow(depth: DepthMap, motion: Motion6DoF, intr: Intrinsics) -> FlowField:
    return flow_from_pose(depth, motion_to_se3(motion), intr)


def generate_training_pair(
    depth: DepthMap, model: MotionModel, rng: np.random.Generator, intr: Intrinsics
) -> tuple[FlowField, Motion6DoF]:
    motion = sample(model, rng)
    return synthesize_flow(depth, motion, intr), motion


@dataclass(frozen=True, eq=False)
class TrainingSample:
    index: int
    seed_entropy: tuple[int, ...]
    depth_index: int
    motion: Motion6DoF
    flow: FlowField


def sample_streams(seed: int, count: int) -> list[np.random.SeedSequence]:
    """One independent child stream per sample; sample k always gets child k."""
    return np.random.SeedSequence(seed).spawn(count)


def generate_training_batch(
    depths: Sequence[DepthMap],
    model: MotionModel,
    seed: int,
    count: int,
    intr: Intrinsics,
    threads: int = 1,
) -> list[TrainingSample]:
    """Batch synthesis. Each sample draws its depth map and motion from its own
    stream, so the output does not depend on ``threads`` or on scheduling."""
    if count < 0:
        raise InputError(f"count must be >= 0, got {count}")
    if count and not depths:
        raise InputError("no depth maps to synthesize from")
    streams = sample_streams(seed, count)

    def one(k: int) -> TrainingSample:
        ss = streams[k]
        rng = np.random.default_rng(ss)
        d = int(rng.integers(len(depths)))
        flow, motion = generate_training_pair(depths[d], model, rng, intr)
        return TrainingSample(k, (ss.entropy, *ss.spawn_key), d, motion, flow)

    if threads <= 1:
        results = [one(k) for k in range(count)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(count)))
    logger.info("synthesized %d training pairs from %d depth maps", count, len(depths))
    return results
