"""
Rigid-Motion Algebra
====================
Euler angles, unit quaternions, SE3 poses and the 6DoF motion vector that
every other part of the toolkit passes around.

Euler convention (used everywhere: flow synthesis, VO, pose graph):
    R = Rz(gamma) @ Ry(beta) @ Rx(alpha)
i.e. rotate about x by alpha, then about the fixed y by beta, then about the
fixed z by gamma. In scipy terms this is ``Rotation.from_euler("xyz", ...)``
(lowercase = extrinsic).

Gimbal lock (|beta| = pi/2): gamma is set to 0 and alpha carries the
remaining rotation about the common axis.

Quaternions are stored (w, x, y, z) with w >= 0; when w == 0 the first
non-zero vector component is made positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.spatial.transform import Rotation

from src.utils.errors import InputError

ORTHO_TOL = 1e-9
QUAT_NORM_TOL = 1e-9
_GIMBAL_EPS = 1e-12

DOF_NAMES = ("t_x", "t_y", "t_z", "alpha", "beta", "gamma")


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]."""
    w = math.remainder(a, 2.0 * math.pi)
    if w <= -math.pi:
        w += 2.0 * math.pi
    return w


@dataclass(frozen=True)
class Motion6DoF:
    """Translation (m) + Euler angles (rad). Angles are wrapped into (-pi, pi]."""

    t_x: float = 0.0
    t_y: float = 0.0
    t_z: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        values = [float(getattr(self, n)) for n in DOF_NAMES]
        if not all(math.isfinite(v) for v in values):
            raise InputError(f"Motion6DoF components must be finite, got {values}")
        for name, v in zip(DOF_NAMES, values):
            object.__setattr__(self, name, wrap_angle(v) if name in ("alpha", "beta", "gamma") else v)

    @classmethod
    def from_array(cls, values: Iterable[float]) -> "Motion6DoF":
        arr = np.asarray(list(values), dtype=float).ravel()
        if arr.size != 6:
            raise InputError(f"Motion6DoF needs 6 values, got {arr.size}")
        return cls(*arr.tolist())

    def as_array(self) -> np.ndarray:
        return np.array([self.t_x, self.t_y, self.t_z, self.alpha, self.beta, self.gamma])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.t_x, self.t_y, self.t_z])

    @property
    def angles(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma])


def _canonical_sign(q: np.ndarray) -> np.ndarray:
    """q = (w, x, y, z); flip so that w > 0, or the first non-zero part is positive."""
    for c in q:
        if c != 0.0:
            return -q if c < 0.0 else q
    return q


@dataclass(frozen=True)
class UnitQuaternion:
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        q = np.array([self.w, self.x, self.y, self.z], dtype=float)
        if not np.all(np.isfinite(q)):
            raise InputError(f"quaternion components must be finite, got {q}")
        if abs(np.linalg.norm(q) - 1.0) > QUAT_NORM_TOL:
            raise InputError(f"quaternion norm {np.linalg.norm(q):.12g} is not 1")
        q = _canonical_sign(q)
        for name, v in zip(("w", "x", "y", "z"), q.tolist()):
            object.__setattr__(self, name, v)

    @classmethod
    def normalized(cls, w: float, x: float, y: float, z: float) -> "UnitQuaternion":
        q = np.array([w, x, y, z], dtype=float)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise InputError("cannot normalise a zero or non-finite quaternion")
        return cls(*(q / n).tolist())

    def as_wxyz(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def as_xyzw(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w])

    def to_rotation(self) -> np.ndarray:
        return Rotation.from_quat(self.as_xyzw()).as_matrix()

    @classmethod
    def from_rotation(cls, R: np.ndarray) -> "UnitQuaternion":
        x, y, z, w = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
        return cls.normalized(w, x, y, z)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SE3Pose:
    """Rigid transform x -> R @ x + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(3)
        if R.shape != (3, 3):
            raise InputError(f"rotation must be 3x3, got {R.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InputError("SE3Pose entries must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise InputError("rotation is not orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "SE3Pose":
        T = np.asarray(T, dtype=float)
        if T.shape not in ((4, 4), (3, 4)):
            raise InputError(f"expected a 3x4 or 4x4 matrix, got {T.shape}")
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (..., 3) array of points."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def orthonormalized(self) -> "SE3Pose":
        return SE3Pose(orthonormalize(self.rotation), self.translation)

    def __matmul__(self, other: "SE3Pose") -> "SE3Pose":
        return compose(self, other)

    def allclose(self, other: "SE3Pose", atol: float = 1e-9) -> bool:
        return bool(np.max(np.abs(self.matrix() - other.matrix())) <= atol)


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (Frobenius) via SVD."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def euler_to_rotation(alpha: float, beta: float, gamma: float) -> np.ndarray:
    return Rotation.from_euler("xyz", [alpha, beta, gamma]).as_matrix()


def rotation_to_euler(R: np.ndarray) -> tuple[float, float, float]:
    """Inverse of ``euler_to_rotation`` with the gimbal-lock rule gamma := 0."""
    R = np.asarray(R, dtype=float)
    cos_beta = math.hypot(R[0, 0], R[1, 0])
    beta = math.atan2(-R[2, 0], cos_beta)
    if cos_beta < _GIMBAL_EPS:
        # R = Ry(+-pi/2) Rx(alpha): R[1,1] = cos(alpha), R[1,2] = -sin(alpha)
        gamma = 0.0
        alpha = math.atan2(-R[1, 2], R[1, 1])
    else:
        alpha = math.atan2(R[2, 1], R[2, 2])
        gamma = math.atan2(R[1, 0], R[0, 0])
    return wrap_angle(alpha), wrap_angle(beta), wrap_angle(gamma)


def motion_to_se3(m: Motion6DoF) -> SE3Pose:
    return SE3Pose(euler_to_rotation(m.alpha, m.beta, m.gamma), m.translation)


def se3_to_motion(p: SE3Pose) -> Motion6DoF:
    alpha, beta, gamma = rotation_to_euler(p.rotation)
    t = p.translation
    return Motion6DoF(t[0], t[1], t[2], alpha, beta, gamma)


def compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    return SE3Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: SE3Pose) -> SE3Pose:
    Rt = p.rotation.T
    return SE3Pose(Rt, -Rt @ p.translation)


def relative(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """inverse(a) o b, the pose of b expressed in the frame of a."""
    return compose(inverse(a), b)


def quat_from_euler(alpha: float, beta: float, gamma: float) -> UnitQuaternion:
    x, y, z, w = Rotation.from_euler("xyz", [alpha, beta, gamma]).as_quat()
    return UnitQuaternion.normalized(w, x, y, z)


def euler_from_quat(q: UnitQuaternion) -> tuple[float, float, float]:
    return rotation_to_euler(q.to_rotation())


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle (rad) of a rotation matrix."""
    return float(Rotation.from_matrix(np.asarray(R, dtype=float)).magnitude())
