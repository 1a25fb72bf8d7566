import numpy as np
import pytest
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from src.engines.pose_graph import (
    CONSECUTIVE,
    LOOP,
    MAX_DENSE_NODES,
    MotionEdge,
    PoseGraph,
    build_graph,
    edge_information,
    optimize,
    pose_to_vec7,
    vec7_to_pose,
)
from src.engines.reloc import LoopCandidate
from src.engines.vo_estimator import MotionEstimate
from src.models.se3 import Motion6DoF, SE3Pose, compose, euler_to_rotation, inverse, motion_to_se3, se3_to_motion
from src.models.trajectory import motions_from_trajectory
from src.models.uncertainty import HyperParams, SigmaParams, covariance_q
from src.utils.errors import GraphError, InputError
from tests.conftest import random_trajectory

SIGMAS = SigmaParams.uniform(0.1, 0.01)
HP = HyperParams(1.0, 1.0)
IDENTITY7 = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]


def _estimates(motions, first=0):
    return [MotionEstimate(m, np.eye(6) * 1e-4, frames=(first + k, first + k + 1)) for k, m in enumerate(motions)]


def _loop(traj, i, j):
    m = se3_to_motion(compose(inverse(traj[j]), traj[i]))
    return LoopCandidate(i, j, 50, True), MotionEstimate(m, np.eye(6) * 1e-4, frames=(i, j))


def test_two_node_graph():
    m = Motion6DoF(0.1, 0.0, 0.5, 0.0, 0.02, 0.0)
    g = build_graph(_estimates([m]), [], SIGMAS, HP)
    assert g.num_nodes == 2 and len(g.edges) == 1
    np.testing.assert_array_equal(g.nodes[0], IDENTITY7)
    assert g.poses()[1].allclose(inverse(motion_to_se3(m)), atol=1e-12)
    assert g.edges[0].kind == CONSECUTIVE


def test_chain_without_loops_reproduces_trajectory(rng):
    traj = random_trajectory(rng, 25)
    g = build_graph(_estimates(motions_from_trajectory(traj)), [], SIGMAS, HP)
    assert len(g.edges) == 24
    assert all(e.kind == CONSECUTIVE for e in g.edges)
    for a, b in zip(g.poses(), traj):
        assert a.allclose(b, atol=1e-9)
    result = optimize(g)
    assert result.iterations == 0
    np.testing.assert_array_equal(result.graph.nodes, g.nodes)


def test_consistent_loop_needs_no_iterations(rng):
    traj = random_trajectory(rng, 30)
    g = build_graph(_estimates(motions_from_trajectory(traj)), [_loop(traj, 0, 29)], SIGMAS, HP)
    assert [e.kind for e in g.edges].count(LOOP) == 1
    result = optimize(g)
    assert result.iterations == 0
    assert result.chi2 <= 1e-18


def test_failed_candidates_are_not_added(rng):
    traj = random_trajectory(rng, 10)
    cand, est = _loop(traj, 0, 9)
    failed = LoopCandidate(0, 9, 3, False)
    g = build_graph(_estimates(motions_from_trajectory(traj)), [(failed, est)], SIGMAS, HP)
    assert len(g.edges) == 9


def test_build_graph_rejects_misnumbered_odometry():
    ests = _estimates([Motion6DoF(t_z=1.0)] * 3)
    ests[1] = MotionEstimate(Motion6DoF(t_z=1.0), np.eye(6), frames=(2, 3))
    with pytest.raises(InputError):
        build_graph(ests, [], SIGMAS, HP)


def test_loop_closure_pulls_drift_back():
    n = 20
    gt = [SE3Pose(np.eye(3), np.array([0.0, 0.0, float(k)])) for k in range(n)]
    drift = SE3Pose(euler_to_rotation(0.0, 0.01, 0.0), np.array([0.0, 0.0, 1.0]))
    odometry = [se3_to_motion(inverse(drift))] * (n - 1)
    loop_est = MotionEstimate(se3_to_motion(compose(inverse(gt[-1]), gt[0])), np.eye(6) * 1e-4, frames=(0, n - 1))
    g = build_graph(_estimates(odometry), [(LoopCandidate(0, n - 1, 40, True), loop_est)], SIGMAS, HP)
    end_before = np.linalg.norm(g.nodes[-1, :3] - gt[-1].translation)
    result = optimize(g)
    end_after = np.linalg.norm(result.graph.nodes[-1, :3] - gt[-1].translation)
    assert result.iterations >= 1
    assert end_after < 0.25 * end_before
    np.testing.assert_array_equal(result.graph.nodes[0], g.nodes[0])


def _triangle():
    meas = {
        (0, 1): SE3Pose(euler_to_rotation(0.0, 0.0, 0.05), np.array([1.0, 0.0, 0.0])),
        (1, 2): SE3Pose(euler_to_rotation(0.01, 0.0, 0.0), np.array([1.0, 0.1, 0.0])),
        (0, 2): SE3Pose(euler_to_rotation(0.0, 0.03, 0.02), np.array([2.2, 0.0, 0.1])),
    }
    nodes = [SE3Pose.identity(), meas[0, 1], compose(meas[0, 1], meas[1, 2])]
    edges = [MotionEdge(i, j, pose_to_vec7(T), np.eye(7)) for (i, j), T in meas.items()]
    return PoseGraph(np.array([pose_to_vec7(p) for p in nodes]), edges), meas


def test_triangle_matches_brute_force_least_squares():
    graph, meas = _triangle()

    def nodes_from(x):
        poses = [SE3Pose.identity()]
        for k in range(2):
            p = x[6 * k : 6 * k + 6]
            poses.append(SE3Pose(Rotation.from_rotvec(p[3:]).as_matrix(), p[:3]))
        return poses

    def residuals(x):
        poses = nodes_from(x)
        out = []
        for (i, j), T in meas.items():
            pred = pose_to_vec7(compose(inverse(poses[i]), poses[j]))
            m = pose_to_vec7(T)
            if np.dot(pred[3:], m[3:]) < 0:
                pred[3:] *= -1
            out.append(pred - m)
        return np.concatenate(out)

    x0 = np.concatenate(
        [np.concatenate([p.translation, Rotation.from_matrix(p.rotation).as_rotvec()]) for p in graph.poses()[1:]]
    )
    ref = least_squares(residuals, x0, xtol=1e-15, ftol=1e-15, gtol=1e-15)
    result = optimize(graph, tol=1e-14)
    assert result.chi2 == pytest.approx(2 * ref.cost, rel=1e-6)
    for a, b in zip(result.graph.poses(), nodes_from(ref.x)):
        assert a.allclose(b, atol=1e-5)


def test_disconnected_graph_raises():
    nodes = np.tile(IDENTITY7, (3, 1))
    g = PoseGraph(nodes, [MotionEdge(0, 1, IDENTITY7, np.eye(7))])
    assert not g.is_connected()
    with pytest.raises(GraphError):
        optimize(g)


def test_dense_solver_limit():
    with pytest.raises(GraphError):
        optimize(PoseGraph(np.tile(IDENTITY7, (MAX_DENSE_NODES + 1, 1))))


def test_single_node_graph_is_trivial():
    result = optimize(PoseGraph(np.array([IDENTITY7])))
    assert result.iterations == 0 and result.chi2 == 0.0


def test_edge_validation():
    with pytest.raises(GraphError):
        MotionEdge(1, 1, IDENTITY7, np.eye(7))
    bad = np.eye(7)
    bad[0, 1] = 1.0
    with pytest.raises(GraphError):
        MotionEdge(0, 1, IDENTITY7, bad)
    with pytest.raises(GraphError):
        MotionEdge(0, 1, IDENTITY7, -np.eye(7))
    with pytest.raises(GraphError):
        MotionEdge(0, 1, IDENTITY7, np.eye(6))
    with pytest.raises(GraphError):
        MotionEdge(0, 1, IDENTITY7, np.eye(7), kind="gps")
    g = PoseGraph(np.tile(IDENTITY7, (2, 1)))
    with pytest.raises(GraphError):
        g.add_edge(MotionEdge(0, 5, IDENTITY7, np.eye(7)))


def test_vec7_round_trip_has_positive_w(rng):
    for _ in range(20):
        p = SE3Pose(Rotation.random(random_state=int(rng.integers(1 << 30))).as_matrix(), rng.normal(size=3))
        v = pose_to_vec7(p)
        assert v[6] >= 0
        assert np.linalg.norm(v[3:]) == pytest.approx(1.0)
        assert vec7_to_pose(v).allclose(p, atol=1e-12)


def test_per_edge_covariance_scaled_like_global():
    m = Motion6DoF(0.1, 0.0, 0.4, 0.01, 0.02, 0.0)
    hp = HyperParams(10000.0, 0.004)
    per_edge = edge_information(m, SIGMAS, hp, covariance=covariance_q(SIGMAS, HyperParams(1.0, 1.0)))
    np.testing.assert_allclose(per_edge, edge_information(m, SIGMAS, hp), rtol=1e-9, atol=1e-12)


def test_zero_covariance_is_floored():
    info = edge_information(Motion6DoF(), SIGMAS, HP, covariance=np.zeros((6, 6)))
    assert np.all(np.isfinite(info))
    assert np.max(np.abs(info)) > 0


def _random_graph(rng, n):
    gt = [SE3Pose.identity()]
    for _ in range(n - 1):
        gt.append(gt[-1] @ SE3Pose(euler_to_rotation(*rng.normal(0.0, 0.2, 3)), rng.normal(0.0, 1.0, 3)))
    pairs = [(k, k + 1) for k in range(n - 1)]
    extra = [(i, j) for i in range(n) for j in range(i + 2, n)]
    for idx in rng.choice(len(extra), min(len(extra), int(rng.integers(1, 4))), replace=False):
        pairs.append(extra[idx])

    def noisy(T):
        return T @ SE3Pose(euler_to_rotation(*rng.normal(0.0, 0.02, 3)), rng.normal(0.0, 0.05, 3))

    edges = []
    for i, j in pairs:
        info = np.diag(rng.uniform(0.5, 2.0, 7))
        edges.append(MotionEdge(i, j, pose_to_vec7(noisy(compose(inverse(gt[i]), gt[j]))), info))
    nodes = [SE3Pose.identity()]
    for e in edges[: n - 1]:
        nodes.append(nodes[-1] @ vec7_to_pose(e.measurement))
    return PoseGraph(np.array([pose_to_vec7(p) for p in nodes]), edges)


def _dense_reference(graph):
    """Minimise the same weighted 7-vector residuals with scipy, anchor fixed."""
    anchor = graph.poses()[0]

    def poses_from(x):
        out = [anchor]
        for p in x.reshape(-1, 6):
            out.append(SE3Pose(Rotation.from_rotvec(p[3:]).as_matrix(), p[:3]))
        return out

    def residuals(x):
        poses = poses_from(x)
        out = []
        for e in graph.edges:
            pred = pose_to_vec7(compose(inverse(poses[e.i]), poses[e.j]))
            if np.dot(pred[3:], e.measurement[3:]) < 0:
                pred[3:] *= -1
            out.append(np.sqrt(np.diag(e.information)) * (pred - e.measurement))
        return np.concatenate(out)

    x0 = np.concatenate(
        [np.concatenate([p.translation, Rotation.from_matrix(p.rotation).as_rotvec()]) for p in graph.poses()[1:]]
    )
    ref = least_squares(residuals, x0, xtol=1e-15, ftol=1e-15, gtol=1e-15)
    return 2.0 * ref.cost, poses_from(ref.x)


@pytest.mark.slow
def test_random_graphs_match_dense_least_squares():
    rng = np.random.default_rng(7)
    for _ in range(200):
        graph = _random_graph(rng, int(rng.integers(3, 11)))
        chi2, poses = _dense_reference(graph)
        result = optimize(graph, max_iters=200, tol=1e-14)
        assert result.chi2 == pytest.approx(chi2, rel=1e-6, abs=1e-12)
        for a, b in zip(result.graph.poses(), poses):
            assert a.allclose(b, atol=1e-5)


def test_optimum_follows_a_common_rigid_transform(rng):
    graph = _random_graph(rng, 6)
    G = SE3Pose(euler_to_rotation(0.3, -0.2, 1.1), np.array([5.0, -2.0, 3.0]))
    moved = PoseGraph(np.array([pose_to_vec7(compose(G, p)) for p in graph.poses()]), list(graph.edges))
    base = optimize(graph, tol=0.0)
    shifted = optimize(moved, tol=0.0)
    assert shifted.chi2 == pytest.approx(base.chi2, rel=1e-6)
    for a, b in zip(shifted.graph.poses(), base.graph.poses()):
        assert a.allclose(compose(G, b), atol=1e-6)
    np.testing.assert_array_equal(shifted.graph.nodes[0], moved.nodes[0])


def test_chi2_never_increases(rng):
    graph = _random_graph(rng, 8)
    chi2s = [optimize(graph, max_iters=k, tol=0.0).chi2 for k in range(8)]
    assert all(b <= a for a, b in zip(chi2s, chi2s[1:]))
    assert chi2s[-1] < chi2s[0]
