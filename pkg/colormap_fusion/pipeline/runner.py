import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from ..config import PipelineConfig
from ..errors import FusionError, StageError
from ..fusion.post_fusion import regularized_sim3_icp
from ..fusion.pose_graph import build_pose_graph, inter_session_edge, optimize_pose_graph, propagate_poses_to_clouds
from ..fusion.pre_fusion import (
    align_session,
    correct_outlier_scales,
    lidar_to_camera_trajectory,
    match_timestamps,
    overlap_translations,
    scale_ransac,
)
from ..io.g2o import write_g2o
from ..io.manifest import load_session_inputs, read_manifest
from ..io.ply import write_ply
from ..io.reports import write_run_report
from ..models.geometry import ColoredPointCloud, PoseSE3, TimedTrajectory, TransformSim3
from ..models.schemas import (
    FusionInputs,
    IcpResult,
    NodeId,
    PoseEdge,
    PoseGraph,
    PoseGraphResult,
    RunReport,
    ScaleConsensus,
    SessionAlignment,
    SessionData,
    StageRecord,
)

logger = logging.getLogger(__name__)

STAGES = (
    "lidar_to_camera",
    "prefusion_align",
    "scale_ransac",
    "outlier_repair",
    "registration",
    "pose_graph",
    "propagate",
)


def _digest(previous: str, arrays: Iterable) -> str:
    h = hashlib.sha256(previous.encode())
    for array in arrays:
        h.update(np.ascontiguousarray(np.asarray(array, dtype=np.float64)).tobytes())
    return h.hexdigest()


def inputs_digest(inputs: FusionInputs) -> str:
    arrays = []
    for session in inputs.sessions:
        arrays.extend([session.cloud.positions, session.cloud.colors, session.trajectory.timestamps])
        arrays.extend([session.trajectory.translations(), session.trajectory.rotations()])
    arrays.extend([inputs.lidar_cloud.positions, inputs.lidar_cloud.colors, inputs.lidar_trajectory.timestamps])
    arrays.extend([inputs.lidar_trajectory.translations(), inputs.lidar_trajectory.rotations()])
    arrays.extend([inputs.extrinsics.cam_from_lidar.as_matrix(), [inputs.extrinsics.time_offset]])
    return _digest("", arrays)


def verify_stage_chain(report: RunReport) -> bool:
    """True when stages are in execution order and each consumes its predecessor's output hash"""
    for position, stage in enumerate(report.stages):
        if stage.index != position or stage.name != STAGES[position]:
            return False
        if position > 0 and stage.input_hash != report.stages[position - 1].output_hash:
            return False
    return True


class PipelineResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    report: RunReport
    camera_trajectory: Optional[TimedTrajectory] = None
    alignments: List[SessionAlignment] = []
    consensus: Optional[ScaleConsensus] = None
    registrations: List[IcpResult] = []
    graph: Optional[PoseGraph] = None
    graph_result: Optional[PoseGraphResult] = None
    cloud: Optional[ColoredPointCloud] = None

    @property
    def transforms(self) -> List[TransformSim3]:
        """Best available VGGT-to-world transform per session"""
        if self.registrations:
            return [r.transform for r in self.registrations]
        return [a.final_transform for a in self.alignments]


class FusionPipeline:
    """Pre-fusion, registration, pose graph and propagation over a set of sessions"""

    def __init__(self, config: Optional[PipelineConfig] = None):
        self.config = config or PipelineConfig()

    def _fan_out(self, stage: str, work: Callable, items: Sequence):
        def guarded(item):
            session_id, payload = item
            try:
                return work(session_id, payload)
            except FusionError as e:
                if isinstance(e, StageError):
                    raise
                logger.error(f"Stage '{stage}' failed on session {session_id}: {e}")
                raise StageError(stage, e, session_id) from e

        if self.config.workers == 1:
            return [guarded(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
            return list(pool.map(guarded, items))

    def _guard(self, stage: str, work: Callable):
        try:
            return work()
        except FusionError as e:
            if isinstance(e, StageError):
                raise
            logger.error(f"Stage '{stage}' failed: {e}")
            raise StageError(stage, e) from e

    def run(self, inputs: FusionInputs, stop_after: str = STAGES[-1]) -> PipelineResult:
        """
        Run the stages in order, stopping after `stop_after`

        Args:
            inputs: Sessions, LiDAR products and extrinsics
            stop_after: Name of the last stage to execute

        Returns:
            PipelineResult holding every product computed so far and the run report
        """
        if stop_after not in STAGES:
            raise ValueError(f"unknown stage '{stop_after}', expected one of {STAGES}")
        cfg = self.config
        records: List[StageRecord] = []
        previous = inputs_digest(inputs)
        result = PipelineResult(report=RunReport())

        def record(name: str, products: Iterable, diagnostics: Dict) -> bool:
            nonlocal previous
            output = _digest(previous, products)
            records.append(
                StageRecord(index=len(records), name=name, input_hash=previous, output_hash=output, diagnostics=diagnostics)
            )
            previous = output
            logger.info(f"Stage {len(records) - 1} '{name}' done")
            return name == stop_after

        def finish() -> PipelineResult:
            result.report = RunReport(
                stages=records,
                sessions=self._session_summaries(result),
                output_points=len(result.cloud) if result.cloud is not None else 0,
            )
            return result

        sessions = list(inputs.sessions)
        items = [(s.session_id, s) for s in sessions]

        # Metric camera track
        cam = self._guard("lidar_to_camera", lambda: lidar_to_camera_trajectory(inputs.lidar_trajectory, inputs.extrinsics))
        result.camera_trajectory = cam
        if record(
            "lidar_to_camera",
            [cam.timestamps, cam.translations(), cam.rotations()],
            {"poses": len(cam), "time_offset": inputs.extrinsics.time_offset},
        ):
            return finish()

        # Per-session coarse alignment
        alignments = self._fan_out(
            "prefusion_align",
            lambda k, s: align_session(s.trajectory, cam, cfg.prefusion, session_id=k),
            items,
        )
        result.alignments = alignments
        if record(
            "prefusion_align",
            [a.transform.as_matrix() for a in alignments],
            {
                "linearity": [a.linearity for a in alignments],
                "raw_scale": [a.raw_scale for a in alignments],
                "rotation_corrected": [a.rotation_corrected for a in alignments],
            },
        ):
            return finish()

        consensus = self._guard(
            "scale_ransac",
            lambda: scale_ransac(alignments, iterations=cfg.prefusion.ransac_iterations, seed=cfg.seed),
        )
        result.consensus = consensus
        if record(
            "scale_ransac",
            [[consensus.best_scale], sorted(consensus.inliers)],
            {
                "best_scale": consensus.best_scale,
                "inliers": sorted(consensus.inliers),
                "threshold": consensus.threshold,
                "alpha": consensus.alpha,
                "candidate_session": consensus.candidate_session,
            },
        ):
            return finish()

        def repair():
            overlap = overlap_translations(
                [s.trajectory for s in sessions], cfg.prefusion.max_gap, cfg.prefusion.min_overlap_frames
            )
            return correct_outlier_scales(alignments, consensus.inliers, overlap, cfg.prefusion.min_overlap_frames)

        alignments = self._guard("outlier_repair", repair)
        result.alignments = alignments
        if record(
            "outlier_repair",
            [a.final_transform.as_matrix() for a in alignments],
            {
                "corrected_scale": [a.corrected_scale for a in alignments],
                "scale_inlier": [a.scale_inlier for a in alignments],
            },
        ):
            return finish()

        # Regularized Sim(3) ICP against the LiDAR map
        registrations = self._fan_out(
            "registration",
            lambda k, s: self._register(s, alignments[k].final_transform, inputs.lidar_cloud),
            items,
        )
        result.registrations = registrations
        if record(
            "registration",
            [r.transform.as_matrix() for r in registrations],
            {
                "scale": [r.transform.scale for r in registrations],
                "objective": [r.final_objective for r in registrations],
                "iterations": [r.iterations_used for r in registrations],
                "converged": [r.converged for r in registrations],
            },
        ):
            return finish()

        # Pose graph over frames
        transforms = [r.transform for r in registrations]
        world_poses = [[t.transform_pose(p) for p in s.trajectory.poses] for s, t in zip(sessions, transforms)]
        world_clouds = [s.cloud.with_positions(t.apply(s.cloud.positions)) for s, t in zip(sessions, transforms)]

        def overlap_edge(k, _):
            return self._inter_edge(k, sessions, world_poses, world_clouds)

        edges = self._fan_out("pose_graph", overlap_edge, [(k, None) for k in range(len(sessions) - 1)])
        graph = self._guard("pose_graph", lambda: build_pose_graph(world_poses, [e for e in edges if e], cfg.pgo))
        graph_result = self._guard("pose_graph", lambda: optimize_pose_graph(graph, cfg.pgo))
        result.graph = graph
        result.graph_result = graph_result
        if record(
            "pose_graph",
            [graph_result.poses[n].as_matrix() for n in sorted(graph_result.poses)],
            {
                "nodes": len(graph.nodes),
                "edges": len(graph.edges),
                "initial_chi2": graph_result.initial_chi2,
                "final_chi2": graph_result.final_chi2,
                "iterations": graph_result.iterations,
                "converged": graph_result.converged,
            },
        ):
            return finish()

        frame_clouds = self._frame_clouds(world_clouds, world_poses)
        cloud = self._guard("propagate", lambda: propagate_poses_to_clouds(frame_clouds, graph_result.poses))
        result.cloud = cloud
        record("propagate", [cloud.positions, cloud.colors], {"points": len(cloud)})
        return finish()

    def _register(self, session: SessionData, initial: TransformSim3, lidar: ColoredPointCloud) -> IcpResult:
        margin = self.config.postfusion.lidar_margin
        moved = initial.apply(session.cloud.positions)
        low = moved.min(axis=0) - margin
        high = moved.max(axis=0) + margin
        inside = np.all((lidar.positions >= low) & (lidar.positions <= high), axis=1)
        target = lidar.select(inside)
        logger.info(f"Session {session.session_id}: registering {len(session.cloud)} points to {len(target)} LiDAR points")
        return regularized_sim3_icp(
            session.cloud,
            target,
            initial,
            self.config.postfusion.icp_config(anchor_scale=initial.scale),
        )

    def _inter_edge(
        self,
        k: int,
        sessions: Sequence[SessionData],
        world_poses: Sequence[Sequence[PoseSE3]],
        world_clouds: Sequence[ColoredPointCloud],
    ) -> Optional[PoseEdge]:
        older, newer = sessions[k].trajectory, sessions[k + 1].trajectory
        newer_idx, older_idx, gaps = match_timestamps(newer.timestamps, older.timestamps, self.config.prefusion.max_gap)
        if newer_idx.size == 0:
            logger.warning(f"Sessions {k} and {k + 1} share no frames")
            return None
        best = int(np.argmin(gaps))

        def frames_of(cloud: ColoredPointCloud, frames: np.ndarray) -> ColoredPointCloud:
            if cloud.frame_ids is None:
                return cloud
            return cloud.select(np.isin(cloud.frame_ids, frames))

        edge, _ = inter_session_edge(
            (k, int(older_idx[best])),
            world_poses[k][older_idx[best]],
            frames_of(world_clouds[k], older_idx),
            (k + 1, int(newer_idx[best])),
            world_poses[k + 1][newer_idx[best]],
            frames_of(world_clouds[k + 1], newer_idx),
            self.config.pgo,
        )
        return edge

    @staticmethod
    def _frame_clouds(
        world_clouds: Sequence[ColoredPointCloud],
        world_poses: Sequence[Sequence[PoseSE3]],
    ) -> Dict[NodeId, ColoredPointCloud]:
        frame_clouds: Dict[NodeId, ColoredPointCloud] = {}
        for k, cloud in enumerate(world_clouds):
            if cloud.frame_ids is None:
                logger.warning(f"Session {k} cloud has no frame ids; attaching it to its first frame")
                split = {0: cloud}
            else:
                split = cloud.split_frames()
            for frame, piece in split.items():
                pose = world_poses[k][frame] if 0 <= frame < len(world_poses[k]) else PoseSE3.identity()
                frame_clouds[(k, frame)] = piece.with_positions(pose.inverse().apply(piece.positions))
        return frame_clouds

    @staticmethod
    def _session_summaries(result: PipelineResult) -> List[Dict]:
        summaries = []
        for n, alignment in enumerate(result.alignments):
            summary = alignment.summary()
            if n < len(result.registrations):
                icp = result.registrations[n]
                summary.update(
                    {
                        "final_scale": icp.transform.scale,
                        "icp_objective": icp.final_objective,
                        "icp_iterations": icp.iterations_used,
                        "icp_converged": icp.converged,
                        "lambda": icp.lambda_,
                    }
                )
            summaries.append(summary)
        return summaries


def registered_cloud(inputs: FusionInputs, transforms: Sequence[TransformSim3]) -> ColoredPointCloud:
    return ColoredPointCloud.concatenate(
        [s.cloud.with_positions(t.apply(s.cloud.positions)) for s, t in zip(inputs.sessions, transforms)]
    )


def run_pipeline(
    manifest_path: Union[str, Path],
    config: Optional[PipelineConfig] = None,
    out_dir: Optional[Union[str, Path]] = None,
    stop_after: str = STAGES[-1],
) -> PipelineResult:
    """
    Load a manifest, run the pipeline and write its products

    Args:
        manifest_path: Session manifest
        config: Pipeline settings
        out_dir: Output directory; nothing is written when omitted
        stop_after: Last stage to execute

    Returns:
        PipelineResult
    """
    inputs = load_session_inputs(read_manifest(manifest_path))
    result = FusionPipeline(config).run(inputs, stop_after=stop_after)
    if out_dir is None:
        return result

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_run_report(result.report, out_dir)
    if result.alignments and result.cloud is None:
        name = "registered_cloud.ply" if result.registrations else "prefused_cloud.ply"
        write_ply(registered_cloud(inputs, result.transforms), out_dir / name)
    if result.graph is not None and result.graph_result is not None:
        write_g2o(result.graph, out_dir / "pose_graph.g2o", result.graph_result.poses)
    if result.cloud is not None:
        write_ply(result.cloud, out_dir / "global_cloud.ply")
    logger.info(f"Pipeline outputs written to {out_dir}")
    return result
