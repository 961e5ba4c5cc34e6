import logging
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np
from scipy.spatial.transform import Rotation

from ..models.geometry import PoseSE3
from ..models.schemas import NodeId, PoseGraph

logger = logging.getLogger(__name__)


def _pose_fields(pose: PoseSE3) -> str:
    quat = Rotation.from_matrix(pose.rotation).as_quat()
    return " ".join(f"{v:.12g}" for v in (*pose.translation, *quat))


def write_g2o(
    graph: PoseGraph,
    path: Union[str, Path],
    poses: Optional[Mapping[NodeId, PoseSE3]] = None,
) -> Path:
    """
    Dump a pose graph as g2o SE3:QUAT records

    Args:
        graph: Pose graph
        path: Output file
        poses: Vertex poses to write instead of the graph's initial poses

    Returns:
        The written path. Vertex ids number the nodes in (session, frame) order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = {node_id: n for n, node_id in enumerate(sorted(graph.nodes))}
    upper = np.triu_indices(6)

    lines = []
    for node_id, n in ids.items():
        pose = poses[node_id] if poses is not None and node_id in poses else graph.nodes[node_id].pose
        lines.append(f"VERTEX_SE3:QUAT {n} {_pose_fields(pose)}")
    for edge in graph.edges:
        info = " ".join(f"{v:.12g}" for v in edge.information[upper])
        lines.append(f"EDGE_SE3:QUAT {ids[edge.source]} {ids[edge.target]} {_pose_fields(edge.relative)} {info}")
    lines.append(f"FIX {ids[graph.gauge]}")

    path.write_text("\n".join(lines) + "\n")
    logger.debug(f"Wrote pose graph with {len(ids)} vertices to {path}")
    return path
