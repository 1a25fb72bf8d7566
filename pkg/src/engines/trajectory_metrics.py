"""
Trajectory Metrics
==================
ATE (optionally after a rigid least-squares alignment), RPE over a fixed
frame gap, and the KITTI sub-sequence errors over 100..800 m.

All error poses are E = inverse(gt_rel) o est_rel. Rotation errors are
geodesic angles.
"""

from __future__ import annotations

import logging
import math
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from src.models.se3 import SE3Pose, compose, inverse, relative, rotation_angle
from src.models.trajectory import Trajectory
from src.utils.errors import ConfigError, InputError

logger = logging.getLogger(__name__)

ALIGN_MODES = ("rigid", "none")
KITTI_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


def rigid_alignment(gt_xyz: np.ndarray, est_xyz: np.ndarray) -> SE3Pose:
    """Least-squares R, t (no scale) with gt ~ R est + t, by SVD of the
    cross-covariance of the centred point sets."""
    mu_g, mu_e = gt_xyz.mean(axis=0), est_xyz.mean(axis=0)
    H = (est_xyz - mu_e).T @ (gt_xyz - mu_g)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return SE3Pose(R, mu_g - R @ mu_e)


def ate(gt: Trajectory, est: Trajectory, align: str = "rigid") -> float:
    """RMSE of position residuals, metres."""
    if align not in ALIGN_MODES:
        raise ConfigError(f"unknown ATE alignment {align!r} (rigid|none)")
    gt.check_matching(est)
    if len(gt) == 0:
        raise InputError("cannot evaluate an empty trajectory")
    g, e = gt.positions(), est.positions()
    if align == "rigid":
        e = rigid_alignment(g, e).apply(e)
    return float(np.sqrt(np.mean(np.sum((g - e) ** 2, axis=1))))


def _error_pose(gt_a: SE3Pose, gt_b: SE3Pose, est_a: SE3Pose, est_b: SE3Pose) -> SE3Pose:
    return compose(inverse(relative(gt_a, gt_b)), relative(est_a, est_b))


def rpe(gt: Trajectory, est: Trajectory, delta: int = 1) -> tuple[float, float]:
    """(translation RMSE in metres, rotation RMSE in degrees) over all pairs (i, i + delta)."""
    gt.check_matching(est)
    if delta < 1:
        raise InputError(f"RPE frame gap must be >= 1, got {delta}")
    if len(gt) <= delta:
        raise InputError(f"trajectory of {len(gt)} poses is too short for delta = {delta}")
    t_err, r_err = [], []
    for i in range(len(gt) - delta):
        E = _error_pose(gt[i], gt[i + delta], est[i], est[i + delta])
        t_err.append(float(np.linalg.norm(E.translation)))
        r_err.append(math.degrees(rotation_angle(E.rotation)))
    return float(np.sqrt(np.mean(np.square(t_err)))), float(np.sqrt(np.mean(np.square(r_err))))


def kitti_errors(
    gt: Trajectory, est: Trajectory, lengths: Sequence[float] = KITTI_LENGTHS, step: int = 1
) -> tuple[float, float]:
    """(t_err in %, r_err in deg per 100 m), averaged over every sub-sequence.

    For each start frame (every ``step``-th) and length L, the end frame is the
    first whose ground-truth path length from the start reaches L; sub-sequences
    running past the end are skipped. The KITTI devkit uses step = 10.
    """
    gt.check_matching(est)
    if step < 1:
        raise InputError(f"step must be >= 1, got {step}")
    dist = gt.path_length()
    if len(dist) == 0 or dist[-1] < min(lengths):
        total = float(dist[-1]) if len(dist) else 0.0
        raise InputError(f"ground-truth path is {total:.3f} m, need at least {min(lengths):g} m")
    t_errs, r_errs = [], []
    for first in range(0, len(gt), step):
        for L in lengths:
            last = int(np.searchsorted(dist, dist[first] + L, side="left"))
            if last >= len(gt):
                continue
            E = _error_pose(gt[first], gt[last], est[first], est[last])
            t_errs.append(np.linalg.norm(E.translation) / L)
            r_errs.append(math.degrees(rotation_angle(E.rotation)) / L)
    logger.debug("KITTI errors over %d sub-sequences", len(t_errs))
    return 100.0 * float(np.mean(t_errs)), 100.0 * float(np.mean(r_errs))


def evaluate(gt: Trajectory, est: Trajectory, align: str = "rigid", delta: int = 1, step: int = 1) -> dict:
    """All metrics for one run. KITTI errors are NaN when the path is under 100 m."""
    result = {
        "align": align,
        "ate": ate(gt, est, align),
        "ate_unaligned": ate(gt, est, "none"),
    }
    result["rpe_trans"], result["rpe_rot_deg"] = rpe(gt, est, delta)
    if gt.path_length()[-1] >= KITTI_LENGTHS[0]:
        result["kitti_t_err"], result["kitti_r_err"] = kitti_errors(gt, est, step=step)
    else:
        result["kitti_t_err"] = result["kitti_r_err"] = float("nan")
    return result


def summarize_runs(runs: Iterable[Mapping[str, object]]) -> pd.DataFrame:
    """Mean and (population) std over runs for every numeric column, one row per metric."""
    df = pd.DataFrame(list(runs))
    if df.empty:
        raise InputError("no runs to summarize")
    numeric = df.select_dtypes(include="number")
    summary = pd.DataFrame({"mean": numeric.mean(), "std": numeric.std(ddof=0), "runs": numeric.count()})
    summary.index.name = "metric"
    return summary


def format_report(summary: pd.DataFrame, meta: Optional[Mapping[str, object]] = None) -> str:
    """Plain-text table followed by a ``key=value`` block."""
    lines = [summary.to_string(float_format=lambda v: f"{v:.6g}"), ""]
    for key, value in (meta or {}).items():
        lines.append(f"{key}={value}")
    for metric, row in summary.iterrows():
        lines.append(f"{metric}.mean={float(row['mean'])!r}")
        lines.append(f"{metric}.std={float(row['std'])!r}")
    return "\n".join(lines) + "\n"
