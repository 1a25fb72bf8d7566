"""
Simulated World
===============
Desk-scale scene for end-to-end runs: a textured ground plane, axis-aligned
boxes (one central block plus small scattered cubes) and a closed waypoint
loop the camera drives around.

World frame matches the camera frame at zero rotation: x right, y down,
z forward. The ground is the plane y = +ground_height, below a camera
riding at y = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from src.models.se3 import SE3Pose, euler_to_rotation
from src.utils.errors import ConfigError, InputError

MIN_CLEARANCE = 0.5


@dataclass(frozen=True, eq=False)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lo, dtype=float).reshape(3)
        hi = np.array(self.hi, dtype=float).reshape(3)
        if not np.all(hi > lo):
            raise ConfigError(f"box corners must satisfy lo < hi, got {lo} / {hi}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def distance(self, p: np.ndarray) -> float:
        """Euclidean distance from a point to the box, 0 inside."""
        d = np.maximum(np.maximum(self.lo - p, p - self.hi), 0.0)
        return float(np.linalg.norm(d))


class ValueNoise:
    """Multi-octave 3-D value noise in [0, 1] on an integer lattice hashed
    through a seeded permutation table."""

    def __init__(self, seed: int, frequency: float = 0.7, octaves: int = 4):
        if octaves < 1 or not frequency > 0:
            raise ConfigError(f"noise needs octaves >= 1 and frequency > 0, got {octaves}, {frequency}")
        rng = np.random.default_rng(seed)
        perm = rng.permutation(256)
        self._perm = np.concatenate([perm, perm]).astype(np.intp)
        self._values = rng.random(256)
        self.frequency = float(frequency)
        self.octaves = int(octaves)

    def _lattice(self, ix: np.ndarray, iy: np.ndarray, iz: np.ndarray) -> np.ndarray:
        p = self._perm
        return self._values[p[p[p[ix & 255] + (iy & 255)] + (iz & 255)]]

    def _octave(self, pts: np.ndarray) -> np.ndarray:
        base = np.floor(pts)
        f = pts - base
        f = f * f * (3.0 - 2.0 * f)
        i = base.astype(np.int64)
        ix, iy, iz = i[:, 0], i[:, 1], i[:, 2]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        out = np.zeros(len(pts))
        for dx in (0, 1):
            wx = fx if dx else 1.0 - fx
            for dy in (0, 1):
                wy = fy if dy else 1.0 - fy
                for dz in (0, 1):
                    wz = fz if dz else 1.0 - fz
                    out += wx * wy * wz * self._lattice(ix + dx, iy + dy, iz + dz)
        return out

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        total = np.zeros(len(pts))
        amp, freq, norm = 1.0, self.frequency, 0.0
        for _ in range(self.octaves):
            total += amp * self._octave(pts * freq)
            norm += amp
            amp *= 0.5
            freq *= 2.0
        return np.clip(total / norm, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class Scene:
    ground_height: float = 1.5
    boxes: tuple[Box, ...] = ()
    texture_seed: int = 0
    texture_frequency: float = 0.7
    texture_octaves: int = 4
    max_depth: float = 80.0
    texture: ValueNoise = field(init=False, repr=False)

    def __post_init__(self):
        if not self.ground_height >= MIN_CLEARANCE:
            raise ConfigError(f"ground must be at least {MIN_CLEARANCE} m below the camera, got {self.ground_height}")
        if not self.max_depth > 0:
            raise ConfigError(f"max_depth must be positive, got {self.max_depth}")
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(
            self, "texture", ValueNoise(self.texture_seed, self.texture_frequency, self.texture_octaves)
        )

    def clearance(self, p: np.ndarray) -> float:
        """Distance from a camera centre to the nearest surface."""
        d = self.ground_height - float(p[1])
        for b in self.boxes:
            d = min(d, b.distance(np.asarray(p, dtype=float)))
        return d


def default_scene(seed: int = 0, sprites: int = 40, block_half: float = 3.0) -> Scene:
    """Central block, plus small cubes scattered in a ring outside the track."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    g = 1.5
    boxes = [Box((-block_half, g - 4.5, -block_half), (block_half, g, block_half))]
    for _ in range(sprites):
        r = rng.uniform(14.0, 22.0)
        phi = rng.uniform(0.0, 2.0 * math.pi)
        s = rng.uniform(0.3, 1.0)
        c = np.array([r * math.cos(phi), rng.uniform(g - 3.0, g - s / 2), r * math.sin(phi)])
        boxes.append(Box(c - s / 2, c + s / 2))
    return Scene(g, tuple(boxes), texture_seed=seed)


@dataclass(frozen=True)
class TrajectorySpec:
    """Closed waypoint loop on the ground plane, given as (x, z) pairs.

    ``laps`` may exceed 1 to revisit the start; ``heading_offset`` turns the
    camera away from the direction of travel (-pi/2 looks inward on a
    counter-clockwise loop); the heading follows the chord of the path over
    ``smoothing`` metres centred on the pose.
    """

    waypoints: tuple[tuple[float, float], ...] = ((-8.0, -8.0), (8.0, -8.0), (8.0, 8.0), (-8.0, 8.0), (-8.0, -8.0))
    poses_per_segment: int = 25
    laps: float = 1.0
    heading_offset: float = -math.pi / 2
    smoothing: float = 2.0
    sigma_t: float = 0.02
    sigma_rot: float = 0.002
    seed: int = 0

    def __post_init__(self):
        wp = tuple((float(x), float(z)) for x, z in self.waypoints)
        object.__setattr__(self, "waypoints", wp)
        if len(wp) < 3 or wp[0] != wp[-1]:
            raise ConfigError("waypoints must form a closed loop (first = last) with at least two segments")
        if any(a == b for a, b in zip(wp, wp[1:])):
            raise ConfigError("consecutive waypoints must differ")
        if self.poses_per_segment < 1:
            raise ConfigError(f"poses_per_segment must be >= 1, got {self.poses_per_segment}")
        if not self.laps >= 1.0:
            raise ConfigError(f"laps must be >= 1, got {self.laps}")
        if self.smoothing < 0:
            raise ConfigError(f"smoothing must be >= 0, got {self.smoothing}")
        if self.sigma_t < 0 or self.sigma_rot < 0:
            raise ConfigError("noise sigmas must be >= 0")
        if self.num_poses < 10:
            raise ConfigError(f"trajectory needs at least 10 poses, got {self.num_poses}")

    @property
    def poses_per_lap(self) -> int:
        return (len(self.waypoints) - 1) * self.poses_per_segment

    @property
    def num_poses(self) -> int:
        return int(round(self.laps * self.poses_per_lap)) + 1

    def to_dict(self) -> dict:
        return {
            "waypoints": [list(w) for w in self.waypoints],
            "poses_per_segment": self.poses_per_segment,
            "laps": self.laps,
            "heading_offset": self.heading_offset,
            "smoothing": self.smoothing,
            "sigma_t": self.sigma_t,
            "sigma_rot": self.sigma_rot,
            "seed": self.seed,
        }


class _Polyline:
    def __init__(self, waypoints: Sequence[tuple[float, float]]):
        self.pts = np.array(waypoints, dtype=float)
        seg = np.linalg.norm(np.diff(self.pts, axis=0), axis=1)
        self.cum = np.concatenate([[0.0], np.cumsum(seg)])
        self.length = float(self.cum[-1])

    def at(self, s: float) -> np.ndarray:
        s = s % self.length
        k = min(int(np.searchsorted(self.cum, s, side="right")) - 1, len(self.pts) - 2)
        f = (s - self.cum[k]) / (self.cum[k + 1] - self.cum[k])
        return self.pts[k] + f * (self.pts[k + 1] - self.pts[k])


def trajectory_poses(spec: TrajectorySpec) -> list[SE3Pose]:
    """World camera-to-world poses. Pose k and pose k + poses_per_lap coincide exactly."""
    line = _Polyline(spec.waypoints)
    n_lap = spec.poses_per_lap
    half = 0.5 * spec.smoothing if spec.smoothing > 0 else 1e-3 * line.length
    poses = []
    for k in range(spec.num_poses):
        s = (k % n_lap) * line.length / n_lap
        x, z = line.at(s)
        dx, dz = line.at(s + half) - line.at(s - half)
        yaw = math.atan2(dx, dz) + spec.heading_offset
        poses.append(SE3Pose(euler_to_rotation(0.0, yaw, 0.0), np.array([x, 0.0, z])))
    return poses


def check_clearance(scene: Scene, poses: Sequence[SE3Pose], minimum: float = MIN_CLEARANCE) -> None:
    for k, p in enumerate(poses):
        c = scene.clearance(p.translation)
        if c < minimum:
            raise InputError(f"pose {k} is {c:.3f} m from the nearest surface, need {minimum} m")


def poses_from_spec(spec: TrajectorySpec, scene: Optional[Scene] = None) -> list[SE3Pose]:
    poses = trajectory_poses(spec)
    if scene is not None:
        check_clearance(scene, poses)
    return poses
