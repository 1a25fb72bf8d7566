"""
Pose Graph
==========
SLAM back end: nodes are absolute camera poses (camera-to-world), edges are
relative camera motions between two nodes weighted by 7x7 information
matrices over (t, qx, qy, qz, qw).

Node and edge poses are stored as 7-vectors (tx, ty, tz, qx, qy, qz, qw) so
that graph dumps round-trip bit for bit.

Edge residual: r = p7(inverse(T_i) o T_j) - p7(measurement), the predicted
quaternion sign aligned with the measured one. ``optimize`` runs
Levenberg-Marquardt over all nodes but the anchor, with right-multiplied
rotation updates R <- R Exp(w) and additive translation updates, solving the
damped normal equations with a dense Cholesky factorisation.

The VO estimator reports motions acting on points (source -> target camera
frame); ``build_graph`` inverts them into camera motions before chaining.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.transform import Rotation

from src.engines.reloc import LoopCandidate
from src.engines.vo_estimator import MotionEstimate
from src.models.se3 import Motion6DoF, SE3Pose, inverse, motion_to_se3, se3_to_motion
from src.models.uncertainty import HyperParams, SigmaParams, covariance_q, information_from_q
from src.utils.errors import GraphError, InputError, NumericalError

logger = logging.getLogger(__name__)

CONSECUTIVE = "consecutive"
LOOP = "loop"
MAX_DENSE_NODES = 2000
LAMBDA_INIT = 1e-4
LAMBDA_MAX = 1e16
CHI2_ZERO = 1e-18
MIN_EDGE_VARIANCE = 1e-12


def pose_to_vec7(pose: SE3Pose) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(pose.rotation).as_quat()
    q = np.array([x, y, z, w])
    if w < 0 or (w == 0 and q[np.flatnonzero(q)[0]] < 0):
        q = -q
    return np.concatenate([pose.translation, q / np.linalg.norm(q)])


def vec7_to_pose(v: np.ndarray) -> SE3Pose:
    v = np.asarray(v, dtype=float)
    return SE3Pose(Rotation.from_quat(v[3:7]).as_matrix(), v[:3])


@dataclass(frozen=True, eq=False)
class MotionEdge:
    i: int
    j: int
    measurement: np.ndarray  # (7,) camera motion from node i to node j
    information: np.ndarray  # (7, 7)
    kind: str = CONSECUTIVE

    def __post_init__(self):
        if self.i == self.j:
            raise GraphError(f"edge endpoints must differ, got ({self.i}, {self.j})")
        m = np.array(self.measurement, dtype=float).reshape(7)
        P = np.array(self.information, dtype=float)
        if P.shape != (7, 7) or not np.all(np.isfinite(P)):
            raise GraphError(f"edge ({self.i}, {self.j}): information must be a finite 7x7 matrix")
        scale = max(1.0, float(np.max(np.abs(P))))
        if np.max(np.abs(P - P.T)) > 1e-9 * scale:
            raise GraphError(f"edge ({self.i}, {self.j}): information is not symmetric")
        if np.linalg.eigvalsh(0.5 * (P + P.T))[0] < -1e-9 * scale:
            raise GraphError(f"edge ({self.i}, {self.j}): information is not positive semi-definite")
        if self.kind not in (CONSECUTIVE, LOOP):
            raise GraphError(f"unknown edge kind {self.kind!r}")
        m.setflags(write=False)
        P.setflags(write=False)
        object.__setattr__(self, "measurement", m)
        object.__setattr__(self, "information", P)

    @property
    def motion(self) -> Motion6DoF:
        return se3_to_motion(vec7_to_pose(self.measurement))

    @property
    def pose(self) -> SE3Pose:
        return vec7_to_pose(self.measurement)


@dataclass(eq=False)
class PoseGraph:
    nodes: np.ndarray  # (n, 7)
    edges: list[MotionEdge] = field(default_factory=list)
    anchor: int = 0

    def __post_init__(self):
        self.nodes = np.array(self.nodes, dtype=float).reshape(-1, 7)
        if not 0 <= self.anchor < len(self.nodes):
            raise GraphError(f"anchor {self.anchor} is not a node")
        for e in self.edges:
            self._check_endpoints(e)

    def _check_endpoints(self, e: MotionEdge) -> None:
        n = len(self.nodes)
        if not (0 <= e.i < n and 0 <= e.j < n):
            raise GraphError(f"edge ({e.i}, {e.j}) references a missing node (graph has {n})")

    def add_edge(self, e: MotionEdge) -> None:
        self._check_endpoints(e)
        self.edges.append(e)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def poses(self) -> list[SE3Pose]:
        return [vec7_to_pose(v) for v in self.nodes]

    def is_connected(self) -> bool:
        n = self.num_nodes
        if n <= 1:
            return True
        if not self.edges:
            return False
        rows = [e.i for e in self.edges]
        cols = [e.j for e in self.edges]
        adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        count, _ = connected_components(adj, directed=False)
        return count == 1

    def copy_with_nodes(self, nodes: np.ndarray) -> "PoseGraph":
        return PoseGraph(nodes, list(self.edges), self.anchor)


def edge_information(
    camera_motion: Motion6DoF,
    sigmas: SigmaParams,
    hp: HyperParams,
    covariance: Optional[np.ndarray] = None,
    method: str = "pinv",
) -> np.ndarray:
    """Scaled covariance (global sigmas, or a per-edge covariance scaled the
    same way) turned into a 7x7 information matrix at the edge's motion."""
    if covariance is None:
        Q = covariance_q(sigmas, hp)
    else:
        Q = np.array(covariance, dtype=float)
        Q[np.diag_indices(6)] = np.maximum(np.diag(Q), MIN_EDGE_VARIANCE)
        Q[3:, :] *= math.sqrt(hp.C_r)
        Q[:, 3:] *= math.sqrt(hp.C_r)
        Q *= hp.C_si
    return information_from_q(Q, camera_motion, method=method)


def _camera_motion(est: MotionEstimate) -> SE3Pose:
    return inverse(motion_to_se3(est.motion))


def build_graph(
    odometry: Sequence[MotionEstimate],
    loops: Sequence[tuple[LoopCandidate, MotionEstimate]],
    sigmas: SigmaParams,
    hp: HyperParams,
    per_edge_covariance: bool = False,
    method: str = "pinv",
) -> PoseGraph:
    nodes = [SE3Pose.identity()]
    edges: list[MotionEdge] = []
    for k, est in enumerate(odometry):
        if est.frames is not None and tuple(est.frames) != (k, k + 1):
            raise InputError(f"odometry estimate {k} covers frames {est.frames}, expected ({k}, {k + 1})")
        rel = _camera_motion(est)
        nodes.append(nodes[-1] @ rel)
        rel_motion = se3_to_motion(rel)
        info = edge_information(
            rel_motion, sigmas, hp, est.covariance if per_edge_covariance else None, method
        )
        edges.append(MotionEdge(k, k + 1, pose_to_vec7(rel), info, CONSECUTIVE))

    graph = PoseGraph(np.array([pose_to_vec7(p) for p in nodes]), edges, anchor=0)
    n_loops = 0
    for cand, est in loops:
        if not cand.passed:
            continue
        rel = _camera_motion(est)
        info = edge_information(
            se3_to_motion(rel), sigmas, hp, est.covariance if per_edge_covariance else None, method
        )
        graph.add_edge(MotionEdge(cand.i, cand.j, pose_to_vec7(rel), info, LOOP))
        n_loops += 1
    logger.info("pose graph: %d nodes, %d odometry edges, %d loop edges", graph.num_nodes, len(odometry), n_loops)
    return graph


# -- optimisation --------------------------------------------------------------


def _skew(a: np.ndarray) -> np.ndarray:
    """Batched cross-product matrices, (m, 3) -> (m, 3, 3)."""
    S = np.zeros(a.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -a[..., 2], a[..., 1]
    S[..., 1, 0], S[..., 1, 2] = a[..., 2], -a[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -a[..., 1], a[..., 0]
    return S


class _Linearization(NamedTuple):
    residuals: np.ndarray  # (m, 7)
    J_i: np.ndarray  # (m, 7, 6)
    J_j: np.ndarray  # (m, 7, 6)


class _EdgeSet:
    """Vectorised view of the edges for residual/Jacobian evaluation."""

    def __init__(self, edges: Sequence[MotionEdge]):
        self.i = np.array([e.i for e in edges], dtype=int)
        self.j = np.array([e.j for e in edges], dtype=int)
        self.meas = np.array([e.measurement for e in edges]).reshape(-1, 7)
        self.info = np.array([e.information for e in edges]).reshape(-1, 7, 7)

    def residuals(self, nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        rot = Rotation.from_quat(nodes[:, 3:])
        Ri = rot[self.i].as_matrix()
        rel_rot = rot[self.i].inv() * rot[self.j]
        dt = nodes[self.j, :3] - nodes[self.i, :3]
        t_ij = np.einsum("mji,mj->mi", Ri, dt)
        q_ij = rel_rot.as_quat()
        sign = np.where(np.sum(q_ij * self.meas[:, 3:], axis=1) < 0, -1.0, 1.0)
        q_ij = q_ij * sign[:, None]
        r = np.concatenate([t_ij - self.meas[:, :3], q_ij - self.meas[:, 3:]], axis=1)
        return r, Ri, t_ij, q_ij

    def chi2(self, nodes: np.ndarray) -> float:
        r = self.residuals(nodes)[0]
        return float(np.einsum("mi,mij,mj->", r, self.info, r))

    def linearize(self, nodes: np.ndarray) -> _Linearization:
        r, Ri, t_ij, q_ij = self.residuals(nodes)
        m = len(r)
        qv, qw = q_ij[:, :3], q_ij[:, 3]
        eye = np.broadcast_to(np.eye(3), (m, 3, 3))
        RiT = np.transpose(Ri, (0, 2, 1))

        J_i = np.zeros((m, 7, 6))
        J_i[:, :3, :3] = -RiT
        J_i[:, :3, 3:] = _skew(t_ij)
        J_i[:, 3:6, 3:] = 0.5 * (-qw[:, None, None] * eye + _skew(qv))
        J_i[:, 6, 3:] = 0.5 * qv

        J_j = np.zeros((m, 7, 6))
        J_j[:, :3, :3] = RiT
        J_j[:, 3:6, 3:] = 0.5 * (qw[:, None, None] * eye + _skew(qv))
        J_j[:, 6, 3:] = -0.5 * qv
        return _Linearization(r, J_i, J_j)


def _retract(nodes: np.ndarray, delta: np.ndarray, free: np.ndarray) -> np.ndarray:
    out = nodes.copy()
    d = delta.reshape(-1, 6)
    out[free, :3] += d[:, :3]
    rot = Rotation.from_quat(nodes[free, 3:]) * Rotation.from_rotvec(d[:, 3:])
    q = rot.as_quat()
    q[q[:, 3] < 0] *= -1.0
    out[free, 3:] = q
    return out


class OptimizationResult(NamedTuple):
    graph: PoseGraph
    chi2: float
    iterations: int


def optimize(graph: PoseGraph, max_iters: int = 100, tol: float = 1e-9) -> OptimizationResult:
    n = graph.num_nodes
    if n > MAX_DENSE_NODES:
        raise GraphError(f"{n} nodes exceeds the dense solver limit of {MAX_DENSE_NODES}")
    if not graph.is_connected():
        raise GraphError("pose graph is not connected")
    if not graph.edges:
        return OptimizationResult(graph, 0.0, 0)

    edges = _EdgeSet(graph.edges)
    nodes = graph.nodes.copy()
    free = np.array([k for k in range(n) if k != graph.anchor], dtype=int)
    # column block of each node in the reduced system, -1 for the anchor
    col = -np.ones(n, dtype=int)
    col[free] = np.arange(len(free))
    dim = 6 * len(free)

    chi2 = edges.chi2(nodes)
    _check_finite(edges, nodes)
    logger.info("optimising %d nodes / %d edges, initial chi2 = %.6g", n, len(graph.edges), chi2)
    if chi2 <= CHI2_ZERO:
        return OptimizationResult(graph.copy_with_nodes(nodes), chi2, 0)

    lam = LAMBDA_INIT
    iterations = 0
    while iterations < max_iters:
        lin = edges.linearize(nodes)
        H, g = _normal_equations(lin, edges, col, dim)
        improved = False
        while lam <= LAMBDA_MAX:
            A = H + lam * np.diag(np.diag(H))
            try:
                delta = -linalg.cho_solve(linalg.cho_factor(A, lower=True, check_finite=False), g)
            except linalg.LinAlgError:
                lam *= 10.0
                continue
            candidate = _retract(nodes, delta, free)
            chi2_new = edges.chi2(candidate)
            if np.isfinite(chi2_new) and chi2_new < chi2:
                rel_change = (chi2 - chi2_new) / chi2
                nodes, chi2 = candidate, chi2_new
                lam /= 10.0
                improved = True
                break
            lam *= 10.0
        if not improved:
            break
        iterations += 1
        logger.debug("LM iteration %d: chi2 = %.9g, lambda = %.1e", iterations, chi2, lam)
        if rel_change < tol or chi2 <= CHI2_ZERO:
            break

    _check_finite(edges, nodes)
    logger.info("optimisation finished after %d iterations, chi2 = %.6g", iterations, chi2)
    return OptimizationResult(graph.copy_with_nodes(nodes), chi2, iterations)


def _check_finite(edges: _EdgeSet, nodes: np.ndarray) -> None:
    r = edges.residuals(nodes)[0]
    bad = np.flatnonzero(~np.all(np.isfinite(r), axis=1))
    if bad.size:
        k = int(bad[0])
        raise NumericalError(f"non-finite residual on edge ({edges.i[k]}, {edges.j[k]})")


def _normal_equations(lin: _Linearization, edges: _EdgeSet, col: np.ndarray, dim: int):
    H = np.zeros((dim, dim))
    g = np.zeros(dim)
    P = edges.info
    blocks = {
        "ii": np.einsum("mki,mkl,mlj->mij", lin.J_i, P, lin.J_i),
        "ij": np.einsum("mki,mkl,mlj->mij", lin.J_i, P, lin.J_j),
        "jj": np.einsum("mki,mkl,mlj->mij", lin.J_j, P, lin.J_j),
    }
    g_i = np.einsum("mki,mkl,ml->mi", lin.J_i, P, lin.residuals)
    g_j = np.einsum("mki,mkl,ml->mi", lin.J_j, P, lin.residuals)
    for m in range(len(edges.i)):
        a, b = col[edges.i[m]], col[edges.j[m]]
        sa = slice(6 * a, 6 * a + 6) if a >= 0 else None
        sb = slice(6 * b, 6 * b + 6) if b >= 0 else None
        if sa is not None:
            H[sa, sa] += blocks["ii"][m]
            g[sa] += g_i[m]
        if sb is not None:
            H[sb, sb] += blocks["jj"][m]
            g[sb] += g_j[m]
        if sa is not None and sb is not None:
            H[sa, sb] += blocks["ij"][m]
            H[sb, sa] += blocks["ij"][m].T
    return H, g
