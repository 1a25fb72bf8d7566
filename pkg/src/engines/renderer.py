"""
Renderer
========
Analytic ray casting of a ``Scene``: per pixel, the nearest intersection of
the ray with the ground plane and every box (slab test). The ray direction
in the camera frame is ((u - c_x) / f_x, (v - c_y) / f_y, 1), so the ray
parameter at the hit is the z-depth itself.

``generate_run`` renders a whole ``TrajectorySpec`` and derives the
noiseless flow for every consecutive pair from the rendered depth and the
true relative motion.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from tqdm import tqdm

from src.engines.flow_synth import flow_from_pose
from src.models.camera import Intrinsics
from src.models.rasters import DepthMap, FlowField
from src.models.scene import Scene, TrajectorySpec, poses_from_spec
from src.models.se3 import Motion6DoF, SE3Pose, compose, inverse
from src.models.trajectory import Trajectory, motions_from_trajectory
from src.utils.log import progress_enabled

logger = logging.getLogger(__name__)

BACKGROUND = 0.0


class Hits(NamedTuple):
    depth: np.ndarray  # (H, W), NaN where nothing is hit
    points: np.ndarray  # (H, W, 3) world coordinates, NaN where nothing is hit


def _slab(origin: np.ndarray, d: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Entry parameter of each ray into an axis-aligned box, inf on a miss."""
    t_near = np.full(d.shape[0], -np.inf)
    t_far = np.full(d.shape[0], np.inf)
    for a in range(3):
        da = d[:, a]
        parallel = da == 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[a] - origin[a]) / da
            t2 = (hi[a] - origin[a]) / da
        inside = lo[a] <= origin[a] <= hi[a]
        t_near = np.where(parallel, t_near if inside else np.inf, np.maximum(t_near, np.minimum(t1, t2)))
        t_far = np.where(parallel, t_far if inside else -np.inf, np.minimum(t_far, np.maximum(t1, t2)))
    hit = (t_near <= t_far) & (t_near > 0.0)
    return np.where(hit, t_near, np.inf)


def cast_rays(scene: Scene, pose: SE3Pose, intr: Intrinsics) -> Hits:
    u, v = intr.pixel_grid()
    d_cam = np.stack([(u - intr.c_x) / intr.f_x, (v - intr.c_y) / intr.f_y, np.ones_like(u)], axis=-1).reshape(-1, 3)
    d = d_cam @ pose.rotation.T
    o = pose.translation

    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(d[:, 1] > 0.0, (scene.ground_height - o[1]) / d[:, 1], np.inf)
    t = np.where(t > 0.0, t, np.inf)
    for box in scene.boxes:
        t = np.minimum(t, _slab(o, d, box.lo, box.hi))

    t[t > scene.max_depth] = np.inf
    miss = ~np.isfinite(t)
    t[miss] = np.nan
    pts = o + t[:, None] * d
    return Hits(t.reshape(intr.shape), pts.reshape(intr.height, intr.width, 3))


def render_depth(scene: Scene, pose: SE3Pose, intr: Intrinsics) -> DepthMap:
    return DepthMap(cast_rays(scene, pose, intr).depth)


def render_image(scene: Scene, pose: SE3Pose, intr: Intrinsics) -> np.ndarray:
    """Grayscale texture at the hit points, float in [0, 1]; background 0."""
    return _shade(scene, cast_rays(scene, pose, intr))


def _shade(scene: Scene, hits: Hits) -> np.ndarray:
    img = np.full(hits.depth.shape, BACKGROUND)
    ok = np.isfinite(hits.depth)
    img[ok] = scene.texture(hits.points[ok])
    return img


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def quantize_depth(depth: DepthMap, scale: float) -> DepthMap:
    """Depth as a 16-bit raster at ``scale`` would store it; out-of-range values become invalid."""
    raw = np.rint(depth.values * scale)
    raw[~np.isfinite(raw) | (raw > 65535)] = 0
    z = raw / scale
    z[raw == 0] = np.nan
    return DepthMap(z)


@dataclass(eq=False)
class SimRun:
    trajectory: Trajectory  # relative to the first pose
    depths: list[DepthMap]
    images: list[np.ndarray]  # uint8
    flows: list[FlowField]  # flows[k]: frame k -> k + 1
    motions: list[Motion6DoF]
    manifest: dict = field(default_factory=dict)


def generate_run(
    spec: TrajectorySpec, scene: Scene, intr: Intrinsics, threads: int = 1, depth_scale: Optional[float] = None
) -> SimRun:
    """Render every pose. With ``depth_scale`` the depth maps are quantized as a
    16-bit raster would store them before the flows are derived, so the
    written sequence is self-consistent."""
    world = poses_from_spec(spec, scene)
    origin_inv = inverse(world[0])
    traj = Trajectory.from_poses([compose(origin_inv, p) for p in world])

    def frame(k: int) -> tuple[DepthMap, np.ndarray]:
        hits = cast_rays(scene, world[k], intr)
        depth = DepthMap(hits.depth)
        if depth_scale is not None:
            depth = quantize_depth(depth, depth_scale)
        return depth, to_uint8(_shade(scene, hits))

    bar = tqdm(total=len(world), desc="render", unit="frame", disable=not progress_enabled(), leave=False)
    rendered = []
    try:
        if threads <= 1:
            for k in range(len(world)):
                rendered.append(frame(k))
                bar.update()
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for r in pool.map(frame, range(len(world))):
                    rendered.append(r)
                    bar.update()
    finally:
        bar.close()
    depths = [r[0] for r in rendered]
    images = [r[1] for r in rendered]

    motions = motions_from_trajectory(traj)
    flows = [
        flow_from_pose(depths[k], compose(inverse(traj[k + 1]), traj[k]), intr) for k in range(len(traj) - 1)
    ]
    manifest = {
        "kind": "simulated",
        "frames": len(traj),
        "poses_per_lap": spec.poses_per_lap,
        "trajectory": spec.to_dict(),
        "scene": {
            "ground_height": scene.ground_height,
            "boxes": len(scene.boxes),
            "texture_seed": scene.texture_seed,
            "texture_frequency": scene.texture_frequency,
            "texture_octaves": scene.texture_octaves,
            "max_depth": scene.max_depth,
        },
        "depth_scale": depth_scale,
        "intrinsics": {
            "f_x": intr.f_x,
            "f_y": intr.f_y,
            "c_x": intr.c_x,
            "c_y": intr.c_y,
            "width": intr.width,
            "height": intr.height,
        },
    }
    logger.info("simulated %d frames (%d per lap)", len(traj), spec.poses_per_lap)
    return SimRun(traj, depths, images, flows, motions, manifest)
