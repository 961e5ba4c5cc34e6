"""Frame-level pose graph: construction, inter-session constraints and optimization.

Residuals live in the se(3) tangent space ordered [translation, rotation];
poses are updated by right perturbation T ∘ exp(δ).
"""
import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix, csc_matrix, identity
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from ..config import PoseGraphSettings
from ..errors import DisconnectedGraph, MissingPose, NoCorrespondences, NonConvergence, SingularSystem
from ..geometry.transforms import se3_adjoint, se3_exp, se3_log, se3_right_jacobian_inverse
from ..models.geometry import ColoredPointCloud, PoseSE3
from ..models.schemas import IcpConfig, NodeId, PoseEdge, PoseGraph, PoseGraphResult, PoseNode
from .post_fusion import icp_se3

logger = logging.getLogger(__name__)

GAUGE: NodeId = (0, 0)
# A graph this close to consistent needs no iterations
_CHI2_FLOOR = 1e-20
_MAX_DAMPING = 1e16


def edge_information(sigma_trans: float, sigma_rot: float, weight: float = 1.0) -> np.ndarray:
    """Isotropic information diag(1/σt² ×3, 1/σr² ×3) scaled by weight"""
    return weight * np.diag([1.0 / sigma_trans ** 2] * 3 + [1.0 / sigma_rot ** 2] * 3)


def build_pose_graph(
    sessions: Sequence[Sequence[PoseSE3]],
    inter_constraints: Sequence[PoseEdge] = (),
    cfg: Optional[PoseGraphSettings] = None,
) -> PoseGraph:
    """
    One node per frame, odometry edges inside sessions, given edges across them

    Args:
        sessions: Metric world poses per session, in frame order
        inter_constraints: Inter-session edges, appended as given
        cfg: Pose graph settings (intra-session sigmas)

    Returns:
        PoseGraph with node (0, 0) fixed as the gauge
    """
    cfg = cfg or PoseGraphSettings()
    if not sessions or not sessions[0]:
        raise DisconnectedGraph("pose graph needs at least one frame in session 0")

    info = edge_information(cfg.sigma_trans, cfg.sigma_rot)
    nodes: Dict[NodeId, PoseNode] = {}
    edges: List[PoseEdge] = []
    for k, poses in enumerate(sessions):
        for i, pose in enumerate(poses):
            node_id = (k, i)
            nodes[node_id] = PoseNode(node_id=node_id, pose=pose, fixed=node_id == GAUGE)
        for i in range(len(poses) - 1):
            edges.append(
                PoseEdge(
                    source=(k, i),
                    target=(k, i + 1),
                    relative=poses[i].between(poses[i + 1]),
                    kind="intra",
                    information=info,
                )
            )
    edges.extend(inter_constraints)
    graph = PoseGraph(nodes=nodes, edges=edges)

    order = {node_id: n for n, node_id in enumerate(sorted(nodes))}
    rows = [order[e.source] for e in edges]
    cols = [order[e.target] for e in edges]
    adjacency = coo_matrix((np.ones(len(edges)), (rows, cols)), shape=(len(order), len(order)))
    count, labels = connected_components(adjacency, directed=False)
    if count > 1:
        gauge_label = labels[order[GAUGE]]
        cut_off = sorted({node_id[0] for node_id, n in order.items() if labels[n] != gauge_label})
        raise DisconnectedGraph(f"sessions {cut_off} have no path to session 0")

    logger.info(f"Pose graph: {len(nodes)} nodes, {len(edges)} edges ({len(inter_constraints)} inter-session)")
    return graph


def inter_session_edge(
    anchor_node: NodeId,
    anchor_pose: PoseSE3,
    anchor_cloud: ColoredPointCloud,
    moving_node: NodeId,
    moving_pose: PoseSE3,
    moving_cloud: ColoredPointCloud,
    cfg: Optional[PoseGraphSettings] = None,
) -> Tuple[PoseEdge, float]:
    """
    Inter-session constraint from rigid ICP over the overlap region

    Args:
        anchor_node: Frame in the older session
        anchor_pose: Its current world pose
        anchor_cloud: Older session's overlap frames in world coordinates
        moving_node: Same frame in the newer session
        moving_pose: Its current world pose
        moving_cloud: Newer session's overlap frames in world coordinates
        cfg: Pose graph settings (inter-session sigmas, ICP gate)

    Returns:
        (edge anchor -> moving, ICP fitness)
    """
    cfg = cfg or PoseGraphSettings()
    icp_cfg = IcpConfig(
        beta=0.0,
        max_iterations=cfg.icp_max_iterations,
        max_correspondence_distance=cfg.icp_max_correspondence_distance,
    )
    correction, fitness = icp_se3(moving_cloud, anchor_cloud, PoseSE3.identity(), icp_cfg)
    if fitness <= 0.0:
        raise NoCorrespondences(f"overlap of {anchor_node} and {moving_node} has no inliers")

    relative = anchor_pose.between(correction.compose(moving_pose))
    edge = PoseEdge(
        source=anchor_node,
        target=moving_node,
        relative=relative,
        kind="inter",
        information=edge_information(cfg.inter_sigma_trans, cfg.inter_sigma_rot, fitness),
    )
    logger.info(
        f"Inter-session edge {anchor_node} -> {moving_node}: fitness {fitness:.4f}, "
        f"correction {np.linalg.norm(correction.translation):.4f} m"
    )
    return edge, fitness


class _GraphProblem:
    """Array view of a pose graph for batched residual evaluation"""

    def __init__(self, graph: PoseGraph):
        self.order = sorted(graph.nodes)
        self.position = {node_id: n for n, node_id in enumerate(self.order)}
        self.gauge = self.position[graph.gauge]
        self.free = [n for n in range(len(self.order)) if n != self.gauge]
        self.column = {n: c for c, n in enumerate(self.free)}

        self.rotations = np.stack([graph.nodes[i].pose.rotation for i in self.order])
        self.translations = np.stack([graph.nodes[i].pose.translation for i in self.order])

        edges = graph.edges
        self.src = np.array([self.position[e.source] for e in edges], dtype=np.int64)
        self.tgt = np.array([self.position[e.target] for e in edges], dtype=np.int64)
        self.meas_rot = np.stack([e.relative.rotation for e in edges]) if edges else np.empty((0, 3, 3))
        self.meas_trans = np.stack([e.relative.translation for e in edges]) if edges else np.empty((0, 3))
        self.information = np.stack([e.information for e in edges]) if edges else np.empty((0, 6, 6))

    def residuals(self, rot_i, trans_i, rot_j, trans_j) -> np.ndarray:
        # log(Z⁻¹ ∘ Ti⁻¹ ∘ Tj) per edge
        rot_it = np.transpose(rot_i, (0, 2, 1))
        rel_rot = rot_it @ rot_j
        rel_trans = np.einsum("eij,ej->ei", rot_it, trans_j - trans_i)
        meas_t = np.transpose(self.meas_rot, (0, 2, 1))
        err_rot = meas_t @ rel_rot
        err_trans = np.einsum("eij,ej->ei", meas_t, rel_trans - self.meas_trans)
        return se3_log(err_rot, err_trans)

    def chi2(self, rotations, translations) -> float:
        if self.src.size == 0:
            return 0.0
        r = self.residuals(rotations[self.src], translations[self.src], rotations[self.tgt], translations[self.tgt])
        return float(np.einsum("ei,eij,ej->", r, self.information, r))

    def linearize(self, rotations, translations):
        rot_i, trans_i = rotations[self.src], translations[self.src]
        rot_j, trans_j = rotations[self.tgt], translations[self.tgt]
        r = self.residuals(rot_i, trans_i, rot_j, trans_j)

        # Right perturbations: dr/dδj = J_r⁻¹(r), dr/dδi = −J_r⁻¹(r)·Ad(Tj⁻¹ ∘ Ti)
        jac_j = se3_right_jacobian_inverse(r)
        rot_jt = np.transpose(rot_j, (0, 2, 1))
        between_rot = rot_jt @ rot_i
        between_trans = np.einsum("eij,ej->ei", rot_jt, trans_i - trans_j)
        jac_i = -jac_j @ se3_adjoint(between_rot, between_trans)
        return r, jac_i, jac_j

    def normal_equations(self, rotations, translations):
        r, jac_i, jac_j = self.linearize(rotations, translations)
        omega = self.information
        size = 6 * len(self.free)
        rows, cols, vals = [], [], []
        gradient = np.zeros(size)

        blocks = {
            ("i", "i"): np.einsum("eki,ekl,elj->eij", jac_i, omega, jac_i),
            ("i", "j"): np.einsum("eki,ekl,elj->eij", jac_i, omega, jac_j),
            ("j", "i"): np.einsum("eki,ekl,elj->eij", jac_j, omega, jac_i),
            ("j", "j"): np.einsum("eki,ekl,elj->eij", jac_j, omega, jac_j),
        }
        weighted = np.einsum("eij,ej->ei", omega, r)
        grads = {"i": np.einsum("eki,ek->ei", jac_i, weighted), "j": np.einsum("eki,ek->ei", jac_j, weighted)}
        ends = {"i": self.src, "j": self.tgt}

        local = np.arange(6)
        for (a, b), block in blocks.items():
            for e in range(self.src.size):
                na, nb = ends[a][e], ends[b][e]
                if na == self.gauge or nb == self.gauge:
                    continue
                ra = 6 * self.column[na] + local
                cb = 6 * self.column[nb] + local
                rows.append(np.repeat(ra, 6))
                cols.append(np.tile(cb, 6))
                vals.append(block[e].reshape(-1))
        for a in ("i", "j"):
            for e in range(self.src.size):
                node = ends[a][e]
                if node != self.gauge:
                    gradient[6 * self.column[node] + local] += grads[a][e]

        if rows:
            hessian = coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(size, size),
            ).tocsc()
        else:
            hessian = csc_matrix((size, size))
        return hessian, gradient

    def retract(self, rotations, translations, step):
        new_rot = rotations.copy()
        new_trans = translations.copy()
        if not self.free:
            return new_rot, new_trans
        free = np.array(self.free)
        d_rot, d_trans = se3_exp(step.reshape(-1, 6))
        new_trans[free] = translations[free] + np.einsum("nij,nj->ni", rotations[free], d_trans)
        new_rot[free] = rotations[free] @ d_rot
        return new_rot, new_trans


def _orthonormalize(rotations: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(rotations)
    det = np.sign(np.linalg.det(u @ vt))
    fix = np.ones(rotations.shape[:-2] + (3,))
    fix[..., 2] = det
    return u @ (fix[..., :, None] * vt)


def optimize_pose_graph(graph: PoseGraph, cfg: Optional[PoseGraphSettings] = None) -> PoseGraphResult:
    """
    Levenberg-Marquardt over all non-gauge frame poses

    Args:
        graph: Pose graph with one fixed node
        cfg: Damping, tolerance and iteration settings

    Returns:
        PoseGraphResult; the gauge pose is returned as the same object
    """
    cfg = cfg or PoseGraphSettings()
    problem = _GraphProblem(graph)
    rotations, translations = problem.rotations, problem.translations

    chi2 = problem.chi2(rotations, translations)
    initial_chi2 = chi2
    history = [chi2]
    damping = cfg.initial_damping
    converged = bool(chi2 < _CHI2_FLOOR) or not problem.free or problem.src.size == 0
    iterations = 0

    while not converged and iterations < cfg.max_iterations:
        iterations += 1
        hessian, gradient = problem.normal_equations(rotations, translations)
        damped = hessian + damping * identity(hessian.shape[0], format="csc")
        try:
            step = splu(damped.tocsc()).solve(-gradient)
        except RuntimeError as e:
            raise SingularSystem(f"normal equations are singular: {e}") from e
        if not np.all(np.isfinite(step)):
            raise SingularSystem("normal equations produced a non-finite step")

        cand_rot, cand_trans = problem.retract(rotations, translations, step)
        cand_chi2 = problem.chi2(cand_rot, cand_trans)
        change = abs(chi2 - cand_chi2) / max(chi2, _CHI2_FLOOR)

        if cand_chi2 < chi2:
            rotations, translations, chi2 = cand_rot, cand_trans, cand_chi2
            history.append(chi2)
            damping = max(damping / 10.0, 1e-12)
            logger.debug(f"PGO iteration {iterations}: chi2 {chi2:.9g} (accepted, damping {damping:.1e})")
            if change < cfg.tol or chi2 < _CHI2_FLOOR:
                converged = True
        else:
            damping *= 10.0
            logger.debug(f"PGO iteration {iterations}: chi2 {cand_chi2:.9g} rejected, damping {damping:.1e}")
            if change < cfg.tol or damping > _MAX_DAMPING:
                converged = True

    if not converged:
        message = f"pose graph did not converge in {cfg.max_iterations} iterations (chi2 {chi2:.6g})"
        if cfg.strict:
            raise NonConvergence(message)
        logger.warning(message)

    moved = len(history) > 1
    if moved:
        rotations = _orthonormalize(rotations)
    poses: Dict[NodeId, PoseSE3] = {}
    for n, node_id in enumerate(problem.order):
        if n == problem.gauge or not moved:
            poses[node_id] = graph.nodes[node_id].pose
        else:
            poses[node_id] = PoseSE3(rotation=rotations[n], translation=translations[n])

    logger.info(f"PGO: chi2 {initial_chi2:.6g} -> {chi2:.6g} in {iterations} iterations")
    return PoseGraphResult(
        poses=poses,
        final_chi2=chi2,
        initial_chi2=initial_chi2,
        iterations=iterations,
        converged=converged,
        chi2_history=history,
    )


def propagate_poses_to_clouds(
    frame_clouds: Mapping[NodeId, ColoredPointCloud],
    poses: Mapping[NodeId, PoseSE3],
) -> ColoredPointCloud:
    """Transform every frame-local cloud by its world pose and merge in node order"""
    merged = []
    for node_id in sorted(frame_clouds):
        if node_id not in poses:
            raise MissingPose(f"no optimized pose for frame {node_id}")
        cloud = frame_clouds[node_id]
        merged.append(cloud.with_positions(poses[node_id].apply(cloud.positions)))
    return ColoredPointCloud.concatenate(merged)
