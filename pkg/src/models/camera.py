"""
Pinhole Camera Model
====================
Projection, back-projection and stereo disparity -> depth (z = f * B / d).

Pixel coordinates are continuous and (0, 0) is the centre of the top-left
pixel, so pixel (col, row) sits at u = col, v = row. Camera frame: x right,
y down, z forward.

Invalid depth is NaN everywhere in memory.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from src.utils.errors import ConfigError, InputError

# points closer than this to the camera plane are "behind the camera"
EPS_Z = 1e-6
BOUNDS_TOL = 1e-6  # pixels; absorbs round-off at the left and top edges


@dataclass(frozen=True)
class Intrinsics:
    f_x: float
    f_y: float
    c_x: float
    c_y: float
    width: int
    height: int
    baseline: Optional[float] = None

    def __post_init__(self):
        if not (self.f_x > 0 and self.f_y > 0):
            raise ConfigError(f"focal lengths must be positive, got f_x={self.f_x}, f_y={self.f_y}")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ConfigError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.c_x < self.width and 0 <= self.c_y < self.height):
            raise ConfigError(
                f"principal point ({self.c_x}, {self.c_y}) outside {self.width}x{self.height} image"
            )
        if self.baseline is not None and not self.baseline > 0:
            raise ConfigError(f"stereo baseline must be positive, got {self.baseline}")
        for name in ("f_x", "f_y", "c_x", "c_y"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.baseline is not None:
            object.__setattr__(self, "baseline", float(self.baseline))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def shape(self) -> tuple[int, int]:
        """(rows, cols), the numpy shape of rasters taken with this camera."""
        return self.height, self.width

    def matrix(self) -> np.ndarray:
        return np.array([[self.f_x, 0.0, self.c_x], [0.0, self.f_y, self.c_y], [0.0, 0.0, 1.0]])

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """u (columns) and v (rows) coordinates of every pixel, shape (H, W)."""
        return np.meshgrid(
            np.arange(self.width, dtype=float), np.arange(self.height, dtype=float)
        )


class Projection(NamedTuple):
    u: np.ndarray
    v: np.ndarray
    in_bounds: np.ndarray
    behind: np.ndarray


def depth_from_disparity(d, intr: Intrinsics):
    """z = f_x * B / d. Non-positive or non-finite disparity -> NaN."""
    if intr.baseline is None:
        raise ConfigError("depth_from_disparity needs a stereo baseline in the intrinsics")
    d = np.asarray(d, dtype=float)
    ok = np.isfinite(d) & (d > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(ok, intr.f_x * intr.baseline / np.where(ok, d, 1.0), np.nan)
    return float(z) if z.ndim == 0 else z


def backproject(u, v, z, intr: Intrinsics) -> np.ndarray:
    """Pixel + depth -> 3D point(s) in the camera frame, shape (..., 3)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z) & (z > 0)):
        raise InputError("backproject needs finite, strictly positive depth")
    x = (u - intr.c_x) * z / intr.f_x
    y = (v - intr.c_y) * z / intr.f_y
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def project(points, intr: Intrinsics) -> Projection:
    """3D point(s) (..., 3) -> pixel coordinates.

    Points with z <= EPS_Z get ``behind=True`` and NaN coordinates; they are
    never in bounds. Coordinates within BOUNDS_TOL below 0 count as on the image.
    """
    P = np.asarray(points, dtype=float)
    x, y, z = P[..., 0], P[..., 1], P[..., 2]
    behind = ~(z > EPS_Z)
    safe_z = np.where(behind, 1.0, z)
    u = np.where(behind, np.nan, intr.f_x * x / safe_z + intr.c_x)
    v = np.where(behind, np.nan, intr.f_y * y / safe_z + intr.c_y)
    with np.errstate(invalid="ignore"):
        in_bounds = ~behind & (u >= -BOUNDS_TOL) & (u < intr.width) & (v >= -BOUNDS_TOL) & (v < intr.height)
    return Projection(u, v, in_bounds, behind)
