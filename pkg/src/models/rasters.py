"""Dense per-pixel containers: depth maps, flow fields and point clouds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from src.utils.errors import InputError


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Depth in meters, shape (H, W). Anything not finite and > 0 becomes NaN."""

    values: np.ndarray

    def __post_init__(self):
        z = np.array(self.values, dtype=float)
        if z.ndim != 2:
            raise InputError(f"depth map must be 2-D, got shape {z.shape}")
        with np.errstate(invalid="ignore"):
            z[~(np.isfinite(z) & (z > 0))] = np.nan
        object.__setattr__(self, "values", _readonly(z))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.values)

    @classmethod
    def constant(cls, depth: float, width: int, height: int) -> "DepthMap":
        return cls(np.full((height, width), float(depth)))


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel displacement (pixels). u, v are NaN wherever ``valid`` is False."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        u = np.array(self.u, dtype=float)
        v = np.array(self.v, dtype=float)
        valid = np.array(self.valid, dtype=bool)
        if not (u.shape == v.shape == valid.shape) or u.ndim != 2:
            raise InputError(f"flow components disagree in shape: {u.shape}, {v.shape}, {valid.shape}")
        valid &= np.isfinite(u) & np.isfinite(v)
        u[~valid] = np.nan
        v[~valid] = np.nan
        object.__setattr__(self, "u", _readonly(u))
        object.__setattr__(self, "v", _readonly(v))
        object.__setattr__(self, "valid", _readonly(valid))

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @classmethod
    def zeros(cls, width: int, height: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)), np.ones((height, width), bool))


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Per-pixel 3D points (H, W, 3) in the camera frame, pixel-grid ordered."""

    points: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        P = np.array(self.points, dtype=float)
        valid = np.array(self.valid, dtype=bool)
        if P.ndim != 3 or P.shape[2] != 3 or P.shape[:2] != valid.shape:
            raise InputError(f"point cloud shape {P.shape} does not match mask {valid.shape}")
        P[~valid] = np.nan
        object.__setattr__(self, "points", _readonly(P))
        object.__setattr__(self, "valid", _readonly(valid))

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.height * self.width
