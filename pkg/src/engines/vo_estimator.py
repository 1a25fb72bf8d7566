"""
Visual Odometry Estimator
=========================
Motion from dense flow + depth. Stand-in for a learned flow->6DoF regressor:
it consumes the same inputs and produces the same output, and learned
predictions can be plugged in through prediction files instead.

Geometric estimator
-------------------
Finds the motion whose synthesized flow (``flow_synth`` convention, motion
acting on source-frame points) best explains the observed flow:

    min_m  sum_p huber(|| observed(p) - synthesized(p; m) ||)

by damped Gauss-Newton with Huber IRLS weights, starting from zero motion.
The covariance is inv(J^T W J) scaled by the residual variance.

Two-estimator policy
--------------------
Frame pairs whose index gap exceeds T_loop go to the loop estimator,
everything else to the consecutive one. Each side is either an
``EstimatorConfig`` (geometric) or an ``ExternalPredictions`` file.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from src.models.camera import EPS_Z, Intrinsics
from src.models.rasters import DepthMap, FlowField
from src.models.se3 import Motion6DoF
from src.models.uncertainty import HyperParams, SigmaParams, covariance_q
from src.utils.errors import ConfigError, FormatError, InputError

logger = logging.getLogger(__name__)

MIN_VALID_PIXELS = 100
CONSECUTIVE = "consecutive"
LOOP = "loop"


@dataclass(frozen=True)
class EstimatorConfig:
    """Gauss-Newton settings.

    huber_scale is in pixels (default 1.0). stride subsamples the pixel grid
    in both directions; 2 keeps a quarter of the pixels for roughly 4x speed
    at a small accuracy cost.
    """

    max_iterations: int = 50
    tolerance: float = 1e-10
    huber_scale: float = 1.0
    stride: int = 2
    damping: float = 1e-6

    def __post_init__(self):
        if int(self.max_iterations) < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not self.tolerance > 0:
            raise ConfigError(f"tolerance must be > 0, got {self.tolerance}")
        if not self.huber_scale > 0:
            raise ConfigError(f"huber_scale must be > 0, got {self.huber_scale}")
        if int(self.stride) < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if not self.damping >= 0:
            raise ConfigError(f"damping must be >= 0, got {self.damping}")


@dataclass(frozen=True, eq=False)
class MotionEstimate:
    motion: Motion6DoF
    covariance: np.ndarray
    inlier_fraction: float = 1.0
    residual_rms: float = 0.0
    converged: bool = True
    iterations: int = 0
    frames: Optional[tuple[int, int]] = None

    def __post_init__(self):
        C = np.array(self.covariance, dtype=float)
        if C.shape != (6, 6) or not np.all(np.isfinite(C)):
            raise InputError(f"covariance must be a finite 6x6 matrix, got shape {C.shape}")
        scale = max(1.0, float(np.max(np.abs(C))))
        if np.max(np.abs(C - C.T)) > 1e-9 * scale:
            raise InputError("covariance is not symmetric")
        C = 0.5 * (C + C.T)
        if np.linalg.eigvalsh(C)[0] < -1e-9 * scale:
            raise InputError("covariance is not positive semi-definite")
        if not 0.0 <= self.inlier_fraction <= 1.0:
            raise InputError(f"inlier_fraction must be in [0, 1], got {self.inlier_fraction}")
        C.setflags(write=False)
        object.__setattr__(self, "covariance", C)


def _elemental(angle: float, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Rotation about one axis and its derivative with respect to the angle."""
    c, s = math.cos(angle), math.sin(angle)
    if axis == 0:
        R = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
        dR = np.array([[0, 0, 0], [0, -s, -c], [0, c, -s]])
    elif axis == 1:
        R = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
        dR = np.array([[-s, 0, c], [0, 0, 0], [-c, 0, -s]])
    else:
        R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        dR = np.array([[-s, -c, 0], [c, -s, 0], [0, 0, 0]])
    return R.astype(float), dR.astype(float)


def _rotation_and_derivatives(theta: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    Rx, dRx = _elemental(theta[3], 0)
    Ry, dRy = _elemental(theta[4], 1)
    Rz, dRz = _elemental(theta[5], 2)
    R = Rz @ Ry @ Rx
    return R, [Rz @ Ry @ dRx, Rz @ dRy @ Rx, dRz @ Ry @ Rx]


class _FlowProblem:
    """Residuals and Jacobians of the flow-fitting objective at a parameter vector."""

    def __init__(self, points: np.ndarray, targets: np.ndarray, intr: Intrinsics, huber: float):
        self.P = points
        self.target = targets
        self.intr = intr
        self.k = huber

    def residuals(self, theta: np.ndarray) -> Optional[np.ndarray]:
        R, _ = _rotation_and_derivatives(theta)
        Q = self.P @ R.T + theta[:3]
        if np.any(Q[:, 2] <= EPS_Z):
            return None
        pred = np.column_stack(
            [
                self.intr.f_x * Q[:, 0] / Q[:, 2] + self.intr.c_x,
                self.intr.f_y * Q[:, 1] / Q[:, 2] + self.intr.c_y,
            ]
        )
        return self.target - pred

    def jacobian(self, theta: np.ndarray) -> np.ndarray:
        """d(residual)/d(theta), shape (N, 2, 6)."""
        R, dR = _rotation_and_derivatives(theta)
        Q = self.P @ R.T + theta[:3]
        X, Y, Z = Q[:, 0], Q[:, 1], Q[:, 2]
        fx, fy = self.intr.f_x, self.intr.f_y
        # d(u', v')/dQ, (N, 2, 3)
        dproj = np.zeros((len(Z), 2, 3))
        dproj[:, 0, 0] = fx / Z
        dproj[:, 0, 2] = -fx * X / Z**2
        dproj[:, 1, 1] = fy / Z
        dproj[:, 1, 2] = -fy * Y / Z**2
        # dQ/dtheta, (N, 3, 6)
        dQ = np.zeros((len(Z), 3, 6))
        dQ[:, :, :3] = np.eye(3)
        for k, D in enumerate(dR):
            dQ[:, :, 3 + k] = self.P @ D.T
        return -np.einsum("nij,njk->nik", dproj, dQ)

    def weights(self, r: np.ndarray) -> np.ndarray:
        e = np.linalg.norm(r, axis=1)
        return np.where(e <= self.k, 1.0, self.k / np.maximum(e, 1e-300))

    def objective(self, r: Optional[np.ndarray]) -> float:
        if r is None:
            return math.inf
        e = np.linalg.norm(r, axis=1)
        return float(np.sum(np.where(e <= self.k, 0.5 * e**2, self.k * (e - 0.5 * self.k))))


def _valid_correspondences(flow: FlowField, depth: DepthMap, intr: Intrinsics, stride: int):
    if (flow.height, flow.width) != (depth.height, depth.width):
        raise InputError(
            f"flow is {flow.width}x{flow.height} but depth is {depth.width}x{depth.height}"
        )
    if (depth.height, depth.width) != intr.shape:
        raise InputError(f"depth is {depth.width}x{depth.height}, intrinsics {intr.width}x{intr.height}")
    mask = np.zeros(flow.valid.shape, dtype=bool)
    mask[::stride, ::stride] = True
    mask &= flow.valid & depth.valid
    n = int(mask.sum())
    if n < MIN_VALID_PIXELS:
        raise InputError(f"only {n} jointly valid pixels, need at least {MIN_VALID_PIXELS}")
    u, v = intr.pixel_grid()
    z = depth.values[mask]
    uu, vv = u[mask], v[mask]
    points = np.column_stack([(uu - intr.c_x) * z / intr.f_x, (vv - intr.c_y) * z / intr.f_y, z])
    targets = np.column_stack([uu + flow.u[mask], vv + flow.v[mask]])
    return points, targets


def estimate_motion(
    flow: FlowField,
    depth: DepthMap,
    intr: Intrinsics,
    cfg: EstimatorConfig = EstimatorConfig(),
    frames: Optional[tuple[int, int]] = None,
) -> MotionEstimate:
    points, targets = _valid_correspondences(flow, depth, intr, int(cfg.stride))
    problem = _FlowProblem(points, targets, intr, cfg.huber_scale)

    theta = np.zeros(6)
    r = problem.residuals(theta)
    cost = problem.objective(r)
    lam = cfg.damping
    converged = False
    iterations = 0
    for _ in range(int(cfg.max_iterations)):
        if cost == 0.0:
            converged = True
            break
        w = problem.weights(r)
        J = problem.jacobian(theta)
        H = np.einsum("n,nij,nik->jk", w, J, J)
        g = np.einsum("n,nij,ni->j", w, J, r)
        accepted = False
        while lam <= 1e12:
            A = H + lam * np.diag(np.diag(H))
            try:
                delta = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam = max(lam * 10.0, 1e-12)
                continue
            r_new = problem.residuals(theta + delta)
            cost_new = problem.objective(r_new)
            if cost_new <= cost:
                theta, r, cost = theta + delta, r_new, cost_new
                lam = lam / 10.0
                iterations += 1
                accepted = True
                break
            lam = max(lam * 10.0, 1e-12)
        if not accepted or np.linalg.norm(delta) < cfg.tolerance:
            converged = True
            break

    if not converged:
        logger.warning("VO estimate for %s did not converge in %d iterations", frames, cfg.max_iterations)

    e = np.linalg.norm(r, axis=1)
    w = problem.weights(r)
    J = problem.jacobian(theta)
    H = np.einsum("n,nij,nik->jk", w, J, J)
    dof = max(2 * len(e) - 6, 1)
    sigma2 = float(np.sum(w * e**2)) / dof
    cov = sigma2 * np.linalg.pinv(H, hermitian=True)
    return MotionEstimate(
        motion=Motion6DoF.from_array(theta),
        covariance=0.5 * (cov + cov.T),
        inlier_fraction=float(np.mean(e <= cfg.huber_scale)),
        residual_rms=float(math.sqrt(np.mean(e**2))),
        converged=converged,
        iterations=iterations,
        frames=frames,
    )


# -- external predictions ----------------------------------------------------

_TRIU = np.triu_indices(6)


def _cov_from_upper(values: list[float]) -> np.ndarray:
    C = np.zeros((6, 6))
    C[_TRIU] = values
    return C + np.triu(C, 1).T


def load_external_motions(
    source: Union[str, Path],
    sigmas: SigmaParams = SigmaParams(),
    hp: HyperParams = HyperParams(),
) -> list[MotionEstimate]:
    """Prediction file -> estimates. Records: ``i j t_x t_y t_z alpha beta gamma``
    optionally followed by the 21 upper-triangular covariance entries
    (row-major). Missing covariances are filled from the global sigmas (C_si, C_r scaled)."""
    path = Path(source)
    if not path.is_file():
        raise FileNotFoundError(f"No such prediction file: {path}")
    default_cov = covariance_q(sigmas, hp)
    out = []
    with path.open("r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) not in (8, 29):
                raise FormatError(f"expected 8 or 29 fields, got {len(fields)}", str(path), lineno)
            try:
                i, j = int(fields[0]), int(fields[1])
                values = [float(x) for x in fields[2:]]
                motion = Motion6DoF.from_array(values[:6])
                cov = _cov_from_upper(values[6:]) if len(values) == 27 else default_cov
                out.append(MotionEstimate(motion, cov, frames=(i, j)))
            except (ValueError, InputError) as exc:
                raise FormatError(str(exc), str(path), lineno) from None
    logger.info("loaded %d external motion predictions from %s", len(out), path)
    return out


def save_external_motions(path: Union[str, Path], estimates: list[MotionEstimate], with_covariance: bool = True) -> None:
    lines = ["# i j t_x t_y t_z alpha beta gamma [cov upper triangle, 21 values]"]
    for k, est in enumerate(estimates):
        i, j = est.frames if est.frames is not None else (k, k + 1)
        fields = [str(i), str(j)] + [repr(float(x)) for x in est.motion.as_array()]
        if with_covariance:
            fields += [repr(float(x)) for x in est.covariance[_TRIU]]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class ExternalPredictions:
    """Lazily loaded prediction file, indexed by frame pair."""

    path: Path
    sigmas: SigmaParams = field(default_factory=SigmaParams)
    hp: HyperParams = field(default_factory=HyperParams)
    _by_pair: Optional[dict] = field(default=None, init=False, repr=False)

    def lookup(self, i: int, j: int) -> MotionEstimate:
        if self._by_pair is None:
            self._by_pair = {e.frames: e for e in load_external_motions(self.path, self.sigmas, self.hp)}
        try:
            return self._by_pair[(i, j)]
        except KeyError:
            raise InputError(f"no prediction for frame pair ({i}, {j}) in {self.path}") from None


EstimatorSource = Union[EstimatorConfig, ExternalPredictions]


@dataclass(frozen=True)
class EstimatorPolicy:
    consecutive: EstimatorSource = EstimatorConfig()
    loop: EstimatorSource = EstimatorConfig()
    t_loop: float = 50

    def __post_init__(self):
        if not self.t_loop >= 1:
            raise ConfigError(f"T_loop must be >= 1, got {self.t_loop}")


def select_estimator(policy: EstimatorPolicy, frame_gap: int) -> str:
    if frame_gap < 1:
        raise InputError(f"frame gap must be >= 1, got {frame_gap}")
    return LOOP if frame_gap > policy.t_loop else CONSECUTIVE


class PairEstimator:
    """Routes a frame pair to the estimator the policy selects."""

    def __init__(self, policy: EstimatorPolicy, intr: Optional[Intrinsics] = None):
        self.policy = policy
        self.intr = intr

    def source_for(self, i: int, j: int) -> EstimatorSource:
        tag = select_estimator(self.policy, abs(j - i))
        return self.policy.loop if tag == LOOP else self.policy.consecutive

    def needs_flow(self, i: int, j: int) -> bool:
        return isinstance(self.source_for(i, j), EstimatorConfig)

    def estimate(
        self, i: int, j: int, flow: Optional[FlowField] = None, depth: Optional[DepthMap] = None
    ) -> MotionEstimate:
        source = self.source_for(i, j)
        if isinstance(source, ExternalPredictions):
            return source.lookup(i, j)
        if flow is None or depth is None or self.intr is None:
            raise InputError(f"geometric estimate for ({i}, {j}) needs flow, depth and intrinsics")
        return estimate_motion(flow, depth, self.intr, source, frames=(i, j))
