import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from colormap_fusion.config import PoseGraphSettings
from colormap_fusion.errors import DisconnectedGraph, MissingPose, NonConvergence
from colormap_fusion.fusion.pose_graph import (
    GAUGE,
    _GraphProblem,
    build_pose_graph,
    edge_information,
    inter_session_edge,
    optimize_pose_graph,
    propagate_poses_to_clouds,
)
from colormap_fusion.geometry.transforms import geodesic_angle, se3_exp
from colormap_fusion.io.g2o import write_g2o
from colormap_fusion.models.geometry import ColoredPointCloud, PoseSE3
from colormap_fusion.models.schemas import PoseEdge, PoseGraph, PoseNode


def _ground_truth_sessions(rng, sessions: int = 3, frames: int = 15):
    """Poses along a winding path, split into consecutive sessions"""
    poses = []
    for k in range(sessions):
        session = []
        for i in range(frames):
            s = k * frames + i
            rotation = Rotation.from_euler("zyx", [0.1 * s, 0.02 * np.sin(s), 0.01 * s]).as_matrix()
            session.append(PoseSE3(rotation=rotation, translation=[0.5 * s, np.sin(0.3 * s), 0.05 * s]))
        poses.append(session)
    return poses


def _perturb(pose: PoseSE3, rng, trans: float = 0.1, rot: float = 0.05) -> PoseSE3:
    return PoseSE3(
        rotation=pose.rotation @ Rotation.from_rotvec(rng.normal(scale=rot, size=3)).as_matrix(),
        translation=pose.translation + rng.normal(scale=trans, size=3),
    )


def _noiseless_graph(truth, initial) -> PoseGraph:
    """Edges measured on the truth, nodes initialized from a drifted guess"""
    info = edge_information(0.05, 0.01)
    nodes = {}
    edges = []
    for k, session in enumerate(truth):
        for i in range(len(session)):
            nodes[(k, i)] = PoseNode(node_id=(k, i), pose=initial[k][i], fixed=(k, i) == GAUGE)
        for i in range(len(session) - 1):
            edges.append(
                PoseEdge(source=(k, i), target=(k, i + 1), relative=session[i].between(session[i + 1]),
                         kind="intra", information=info)
            )
    for k in range(len(truth) - 1):
        last = len(truth[k]) - 1
        edges.append(
            PoseEdge(source=(k, last), target=(k + 1, 0), relative=truth[k][last].between(truth[k + 1][0]),
                     kind="inter", information=info)
        )
        edges.append(
            PoseEdge(source=(k, 0), target=(k + 1, 3), relative=truth[k][0].between(truth[k + 1][3]),
                     kind="inter", information=info)
        )
    return PoseGraph(nodes=nodes, edges=edges)


@pytest.fixture
def truth():
    """Fixture for ground-truth session poses"""
    return _ground_truth_sessions(np.random.default_rng(0))


def test_build_pose_graph_structure(truth):
    """Test nodes, odometry edges and gauge of a built graph"""
    graph = build_pose_graph(truth[:1])

    assert len(graph.nodes) == 15
    assert len(graph.edges) == 14
    assert graph.gauge == (0, 0)
    assert all(e.kind == "intra" for e in graph.edges)
    assert np.allclose(graph.edges[0].relative.as_matrix(), truth[0][0].between(truth[0][1]).as_matrix())


def test_build_pose_graph_disconnected(truth):
    """Test sessions without a path to session 0 are reported"""
    with pytest.raises(DisconnectedGraph) as excinfo:
        build_pose_graph(truth)
    assert "[1, 2]" in str(excinfo.value)


def test_pose_edge_validation():
    """Test edge endpoint and information checks"""
    with pytest.raises(ValueError):
        PoseEdge(source=(0, 0), target=(0, 0), relative=PoseSE3.identity(), kind="intra",
                 information=np.eye(6))
    with pytest.raises(ValueError):
        PoseEdge(source=(0, 0), target=(0, 1), relative=PoseSE3.identity(), kind="intra",
                 information=-np.eye(6))


def test_optimize_recovers_noiseless_graph(truth):
    """Test drifted initial poses converge onto the measured truth"""
    rng = np.random.default_rng(1)
    initial = [[p if (k, i) == GAUGE else _perturb(p, rng) for i, p in enumerate(s)] for k, s in enumerate(truth)]
    graph = _noiseless_graph(truth, initial)

    started = time.perf_counter()
    result = optimize_pose_graph(graph)
    elapsed = time.perf_counter() - started

    assert result.converged
    assert result.final_chi2 < result.initial_chi2
    assert all(np.diff(result.chi2_history) <= 0)
    assert result.poses[GAUGE] is graph.nodes[GAUGE].pose
    for k, session in enumerate(truth):
        for i, pose in enumerate(session):
            got = result.poses[(k, i)]
            assert np.linalg.norm(got.translation - pose.translation) < 1e-6
            assert geodesic_angle(got.rotation, pose.rotation) < 1e-6
    assert elapsed < 5.0


def test_optimize_consistent_graph_is_fixed_point(truth):
    """Test a graph already at its optimum is returned unchanged"""
    graph = _noiseless_graph(truth, truth)
    result = optimize_pose_graph(graph)

    assert result.converged
    for node_id, node in graph.nodes.items():
        assert np.allclose(result.poses[node_id].as_matrix(), node.pose.as_matrix(), atol=1e-9)


def test_optimize_strict_non_convergence(truth):
    """Test the strict setting turns an iteration cap into an error"""
    rng = np.random.default_rng(2)
    initial = [[p if (k, i) == GAUGE else _perturb(p, rng, 0.5, 0.2) for i, p in enumerate(s)] for k, s in enumerate(truth)]
    graph = _noiseless_graph(truth, initial)

    with pytest.raises(NonConvergence):
        optimize_pose_graph(graph, PoseGraphSettings(max_iterations=1, strict=True))
    relaxed = optimize_pose_graph(graph, PoseGraphSettings(max_iterations=1))
    assert not relaxed.converged
    assert relaxed.iterations == 1


def _noisy_chain(rng, count: int = 10):
    """Ground-truth chain plus odometry and one loop edge measured with noise"""
    truth = _ground_truth_sessions(rng, sessions=1, frames=count)[0]
    info = edge_information(0.05, 0.01)
    pairs = [(i, i + 1) for i in range(count - 1)] + [(0, count - 1)]
    edges = [
        PoseEdge(source=(0, i), target=(0, j), relative=_perturb(truth[i].between(truth[j]), rng, 0.05, 0.01),
                 kind="intra", information=info)
        for i, j in pairs
    ]
    return truth, edges


def _chain_graph(poses, edges) -> PoseGraph:
    nodes = {(0, i): PoseNode(node_id=(0, i), pose=p, fixed=i == 0) for i, p in enumerate(poses)}
    return PoseGraph(nodes=nodes, edges=edges)


def test_optimum_is_no_worse_than_ground_truth():
    """Test the optimized chi2 of a noisy chain never exceeds its chi2 at the true poses"""
    rng = np.random.default_rng(8)
    truth, edges = _noisy_chain(rng)
    at_truth = optimize_pose_graph(_chain_graph(truth, edges))
    drifted = [truth[0]] + [_perturb(p, rng) for p in truth[1:]]
    from_drift = optimize_pose_graph(_chain_graph(drifted, edges))

    assert at_truth.initial_chi2 > 0.0
    assert at_truth.final_chi2 <= at_truth.initial_chi2
    assert from_drift.final_chi2 <= at_truth.initial_chi2 * (1 + 1e-9)
    assert from_drift.final_chi2 == pytest.approx(at_truth.final_chi2, rel=1e-6)


def test_optimize_ignores_edge_order():
    """Test permuting the edge list leaves the optimized poses unchanged"""
    rng = np.random.default_rng(9)
    truth, edges = _noisy_chain(rng, 12)
    drifted = [truth[0]] + [_perturb(p, rng) for p in truth[1:]]
    shuffled = [edges[n] for n in rng.permutation(len(edges))]

    first = optimize_pose_graph(_chain_graph(drifted, edges))
    second = optimize_pose_graph(_chain_graph(drifted, shuffled))

    assert second.final_chi2 == pytest.approx(first.final_chi2, rel=1e-9)
    for node_id, pose in first.poses.items():
        assert np.allclose(second.poses[node_id].as_matrix(), pose.as_matrix(), atol=1e-6)


def test_optimize_single_fixed_node():
    """Test a lone gauge node without edges is returned with zero chi2"""
    pose = PoseSE3(rotation=np.eye(3), translation=[1.0, 2.0, 3.0])
    graph = PoseGraph(nodes={GAUGE: PoseNode(node_id=GAUGE, pose=pose, fixed=True)})
    result = optimize_pose_graph(graph)

    assert result.converged
    assert result.final_chi2 == 0.0
    assert result.iterations == 0
    assert result.poses[GAUGE] is pose


def test_linearize_matches_finite_differences(truth):
    """Test the analytic edge Jacobians against central differences"""
    rng = np.random.default_rng(3)
    initial = [[_perturb(p, rng, 0.3, 0.2) for p in s] for s in truth]
    initial[0][0] = truth[0][0]
    problem = _GraphProblem(_noiseless_graph(truth, initial))
    rot_i, trans_i = problem.rotations[problem.src], problem.translations[problem.src]
    rot_j, trans_j = problem.rotations[problem.tgt], problem.translations[problem.tgt]
    _, jac_i, jac_j = problem.linearize(problem.rotations, problem.translations)

    def moved(rotations, translations, delta):
        d_rot, d_trans = se3_exp(delta)
        return rotations @ d_rot, translations + np.einsum("eij,j->ei", rotations, d_trans)

    h = 1e-6
    for d in range(6):
        step = np.zeros(6)
        step[d] = h
        numeric_i = (
            problem.residuals(*moved(rot_i, trans_i, step), rot_j, trans_j)
            - problem.residuals(*moved(rot_i, trans_i, -step), rot_j, trans_j)
        ) / (2 * h)
        numeric_j = (
            problem.residuals(rot_i, trans_i, *moved(rot_j, trans_j, step))
            - problem.residuals(rot_i, trans_i, *moved(rot_j, trans_j, -step))
        ) / (2 * h)
        assert np.allclose(jac_i[:, :, d], numeric_i, atol=1e-6)
        assert np.allclose(jac_j[:, :, d], numeric_j, atol=1e-6)


def test_inter_session_edge_measures_cloud_offset(rng):
    """Test the inter-session edge absorbs the rigid offset between overlapping clouds"""
    positions = rng.normal(size=(400, 3)) * np.array([2.0, 1.0, 0.5])
    anchor_cloud = ColoredPointCloud(positions=positions, colors=np.full((400, 3), 0.5))
    offset = PoseSE3(rotation=np.eye(3), translation=[0.05, 0.0, -0.02])
    # The moving session sees the same surface displaced by the offset
    moving_cloud = anchor_cloud.with_positions(offset.inverse().apply(positions))

    anchor_pose = PoseSE3(rotation=np.eye(3), translation=[1.0, 0.0, 0.0])
    moving_pose = PoseSE3(rotation=np.eye(3), translation=[1.0, 0.5, 0.0])
    edge, fitness = inter_session_edge((0, 5), anchor_pose, anchor_cloud, (1, 0), moving_pose, moving_cloud)

    expected = anchor_pose.between(offset.compose(moving_pose))
    assert edge.kind == "inter"
    assert fitness == pytest.approx(1.0)
    assert np.allclose(edge.relative.translation, expected.translation, atol=1e-4)
    assert np.allclose(edge.information, edge_information(0.05, 0.01, fitness))


def test_propagate_poses_to_clouds(rng):
    """Test frame-local clouds move with their poses and merge in node order"""
    local = ColoredPointCloud(positions=rng.normal(size=(5, 3)), colors=rng.uniform(size=(5, 3)))
    poses = {
        (0, 0): PoseSE3.identity(),
        (1, 0): PoseSE3(rotation=np.eye(3), translation=[1.0, 2.0, 3.0]),
    }
    merged = propagate_poses_to_clouds({(1, 0): local, (0, 0): local}, poses)

    assert len(merged) == 10
    assert np.allclose(merged.positions[:5], local.positions)
    assert np.allclose(merged.positions[5:], local.positions + [1.0, 2.0, 3.0])

    with pytest.raises(MissingPose):
        propagate_poses_to_clouds({(2, 0): local}, poses)


def test_write_g2o(tmp_path, truth):
    """Test the g2o dump lists vertices, edges and the fixed gauge"""
    graph = _noiseless_graph(truth, truth)
    path = write_g2o(graph, tmp_path / "graph.g2o")
    lines = path.read_text().splitlines()

    vertices = [l for l in lines if l.startswith("VERTEX_SE3:QUAT")]
    edges = [l for l in lines if l.startswith("EDGE_SE3:QUAT")]
    assert len(vertices) == len(graph.nodes)
    assert len(edges) == len(graph.edges)
    assert len(edges[0].split()) == 3 + 7 + 21
    assert lines[-1] == "FIX 0"
