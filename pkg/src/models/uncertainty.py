"""
Edge Uncertainty
================
Per-edge covariance in the 6-parameter (translation + Euler) form and its
conversion to the 7x7 information matrix over (translation, quaternion)
that the pose graph weights residuals with.

    Q = C_si * diag(s_tx^2, s_ty^2, s_tz^2, C_r s_a^2, C_r s_b^2, C_r s_g^2)
    P = pinv(J Q J^T),  J = d(t, qx, qy, qz, qw) / d(t, alpha, beta, gamma)

J Q J^T is 7x7 with rank <= 6, so it is inverted with a truncated
pseudo-inverse (singular values below 1e-12 * s_max dropped). ``method =
"ridge"`` inverts J Q J^T + 1e-10 I instead, for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from src.models.se3 import Motion6DoF
from src.utils.errors import ConfigError, InputError

PINV_RCOND = 1e-12
RIDGE = 1e-10
PSD_TOL = 1e-9


@dataclass(frozen=True)
class SigmaParams:
    sigma_tx: float = 0.02
    sigma_ty: float = 0.02
    sigma_tz: float = 0.02
    sigma_alpha: float = 0.002
    sigma_beta: float = 0.002
    sigma_gamma: float = 0.002

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if not (v > 0 and math.isfinite(v)):
                raise ConfigError(f"{name} must be positive and finite, got {v}")

    @classmethod
    def uniform(cls, sigma_t: float, sigma_rot: float) -> "SigmaParams":
        return cls(sigma_t, sigma_t, sigma_t, sigma_rot, sigma_rot, sigma_rot)

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.sigma_tx, self.sigma_ty, self.sigma_tz, self.sigma_alpha, self.sigma_beta, self.sigma_gamma]
        )


@dataclass(frozen=True)
class HyperParams:
    C_si: float = 10000.0
    C_r: float = 1.0
    # frame-index gap; math.inf disables loops
    T_loop: float = 50

    def __post_init__(self):
        if not (self.C_si > 0 and math.isfinite(self.C_si)):
            raise ConfigError(f"C_si must be positive, got {self.C_si}")
        if not (self.C_r > 0 and math.isfinite(self.C_r)):
            raise ConfigError(f"C_r must be positive, got {self.C_r}")
        if not self.T_loop >= 1:
            raise ConfigError(f"T_loop must be >= 1, got {self.T_loop}")
        if math.isfinite(self.T_loop):
            if self.T_loop != int(self.T_loop):
                raise ConfigError(f"T_loop must be an integer frame gap, got {self.T_loop}")
            object.__setattr__(self, "T_loop", int(self.T_loop))

    @property
    def loops_enabled(self) -> bool:
        return math.isfinite(self.T_loop)


def covariance_q(sigmas: SigmaParams, hp: HyperParams) -> np.ndarray:
    s2 = sigmas.as_array() ** 2
    s2[3:] *= hp.C_r
    return hp.C_si * np.diag(s2)


def quat_euler_jacobian(alpha: float, beta: float, gamma: float) -> np.ndarray:
    """d(qx, qy, qz, qw)/d(alpha, beta, gamma), 4x3, for R = Rz Ry Rx.

    The derivative is taken of the sign-canonical quaternion (w >= 0), so the
    columns flip together with the quaternion.
    """
    c1, s1 = math.cos(alpha / 2), math.sin(alpha / 2)
    c2, s2 = math.cos(beta / 2), math.sin(beta / 2)
    c3, s3 = math.cos(gamma / 2), math.sin(gamma / 2)
    w = c1 * c2 * c3 + s1 * s2 * s3
    # rows x, y, z, w; columns alpha, beta, gamma
    J = 0.5 * np.array(
        [
            [c1 * c2 * c3 + s1 * s2 * s3, -s1 * s2 * c3 - c1 * c2 * s3, -s1 * c2 * s3 - c1 * s2 * c3],
            [-s1 * s2 * c3 + c1 * c2 * s3, c1 * c2 * c3 - s1 * s2 * s3, -c1 * s2 * s3 + s1 * c2 * c3],
            [-s1 * c2 * s3 - c1 * s2 * c3, -c1 * s2 * s3 - s1 * c2 * c3, c1 * c2 * c3 + s1 * s2 * s3],
            [-s1 * c2 * c3 + c1 * s2 * s3, -c1 * s2 * c3 + s1 * c2 * s3, -c1 * c2 * s3 + s1 * s2 * c3],
        ]
    )
    return -J if w < 0 else J


def pose7_jacobian(linearization: Motion6DoF) -> np.ndarray:
    """7x6 Jacobian of (t, qx, qy, qz, qw) with respect to (t, alpha, beta, gamma)."""
    J = np.zeros((7, 6))
    J[:3, :3] = np.eye(3)
    J[3:, 3:] = quat_euler_jacobian(linearization.alpha, linearization.beta, linearization.gamma)
    return J


def _check_psd(M: np.ndarray, what: str) -> None:
    if M.shape[0] != M.shape[1] or not np.all(np.isfinite(M)):
        raise InputError(f"{what} must be a finite square matrix")
    if np.max(np.abs(M - M.T)) > PSD_TOL * max(1.0, np.max(np.abs(M))):
        raise InputError(f"{what} is not symmetric")
    lam = np.linalg.eigvalsh(0.5 * (M + M.T))
    if lam[0] < -PSD_TOL * max(1.0, lam[-1]):
        raise InputError(f"{what} is not positive semi-definite (min eigenvalue {lam[0]:.3g})")


def information_from_q(Q: np.ndarray, linearization: Motion6DoF, method: str = "pinv") -> np.ndarray:
    Q = np.asarray(Q, dtype=float)
    if Q.shape != (6, 6):
        raise InputError(f"Q must be 6x6, got {Q.shape}")
    _check_psd(Q, "Q")
    J = pose7_jacobian(linearization)
    M = J @ Q @ J.T
    if method == "pinv":
        P = np.linalg.pinv(M, rcond=PINV_RCOND, hermitian=True)
    elif method == "ridge":
        P = np.linalg.inv(M + RIDGE * np.eye(7))
    else:
        raise ConfigError(f"unknown information method {method!r} (pinv|ridge)")
    return 0.5 * (P + P.T)


def covariance_from_information(P: np.ndarray) -> np.ndarray:
    """Back to a 7x7 covariance, for diagnostics and external cross-checks."""
    return np.linalg.pinv(np.asarray(P, dtype=float), rcond=PINV_RCOND, hermitian=True)
