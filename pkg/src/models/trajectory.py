"""Time-ordered absolute camera poses (camera-to-world)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from src.models.se3 import Motion6DoF, SE3Pose, compose, inverse, se3_to_motion
from src.utils.errors import InputError


@dataclass(frozen=True, eq=False)
class Trajectory:
    frame_ids: tuple[int, ...]
    poses: tuple[SE3Pose, ...]
    timestamps: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        ids = tuple(int(i) for i in self.frame_ids)
        poses = tuple(self.poses)
        if len(ids) != len(poses):
            raise InputError(f"{len(ids)} frame ids for {len(poses)} poses")
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise InputError("trajectory frame ids must be strictly increasing")
        object.__setattr__(self, "frame_ids", ids)
        object.__setattr__(self, "poses", poses)
        if self.timestamps is not None:
            ts = tuple(float(t) for t in self.timestamps)
            if len(ts) != len(poses):
                raise InputError(f"{len(ts)} timestamps for {len(poses)} poses")
            if any(b <= a for a, b in zip(ts, ts[1:])):
                raise InputError("timestamps must be strictly increasing")
            object.__setattr__(self, "timestamps", ts)

    @classmethod
    def from_poses(cls, poses: Sequence[SE3Pose], timestamps: Optional[Sequence[float]] = None) -> "Trajectory":
        return cls(tuple(range(len(poses))), tuple(poses), None if timestamps is None else tuple(timestamps))

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self) -> Iterator[SE3Pose]:
        return iter(self.poses)

    def __getitem__(self, k: int) -> SE3Pose:
        return self.poses[k]

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def rotations(self) -> np.ndarray:
        return np.array([p.rotation for p in self.poses]).reshape(-1, 3, 3)

    def path_length(self) -> np.ndarray:
        """Cumulative distance travelled, 0 at the first pose."""
        steps = np.linalg.norm(np.diff(self.positions(), axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def transformed(self, T: SE3Pose) -> "Trajectory":
        """Every pose left-multiplied by T (a change of world frame)."""
        return Trajectory(self.frame_ids, tuple(compose(T, p) for p in self.poses), self.timestamps)

    def relative_to_first(self) -> "Trajectory":
        if not self.poses:
            return self
        return self.transformed(inverse(self.poses[0]))

    def check_matching(self, other: "Trajectory") -> None:
        if self.frame_ids != other.frame_ids:
            raise InputError(
                f"trajectories do not match: {len(self)} vs {len(other)} poses or different frame ids"
            )


def motions_from_trajectory(traj: Trajectory, stride: int = 1) -> list[Motion6DoF]:
    """Relative motions in the flow-synthesis convention: the motion maps points
    of frame k's camera into frame (k + stride)'s, M_k = inverse(C_{k+stride}) o C_k."""
    if stride < 1:
        raise InputError(f"stride must be >= 1, got {stride}")
    return [se3_to_motion(compose(inverse(b), a)) for a, b in zip(traj.poses, traj.poses[stride:])]
