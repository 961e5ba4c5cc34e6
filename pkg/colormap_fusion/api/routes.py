import logging
from pathlib import Path
from typing import Optional

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel

from ..config import PipelineConfig
from ..errors import FusionError
from ..evaluation.color_metrics import evaluate_color_map
from ..io.ply import read_ply
from ..models.schemas import ColorMetricsReport, MetricParameters, RunReport
from ..pipeline.runner import STAGES, run_pipeline

logger = logging.getLogger(__name__)

router = APIRouter()

# Pipeline settings (set by main.py on startup)
config: Optional[PipelineConfig] = None


def set_config(pipeline_config: PipelineConfig):
    """Set the global pipeline configuration"""
    global config
    config = pipeline_config


class EvaluateRequest(BaseModel):
    source: Path
    reference: Path
    parameters: Optional[MetricParameters] = None


class PipelineRequest(BaseModel):
    manifest: Path
    out_dir: Optional[Path] = None
    stop_after: str = STAGES[-1]


@router.get("/health")
async def health_check():
    """Health check endpoint"""
    return {"status": "healthy", "config_loaded": config is not None}


@router.post("/evaluate", response_model=ColorMetricsReport)
def evaluate(request: EvaluateRequest):
    """
    Score a colored map against a reference map

    Args:
        request: Source and reference PLY paths with optional metric parameters

    Returns:
        CD, CF, LCR and CCS for the source map
    """
    if config is None:
        raise HTTPException(status_code=500, detail="Configuration not loaded")

    params = request.parameters or config.evaluation.metric_parameters()
    try:
        logger.info(f"Evaluating {request.source} against {request.reference}")
        return evaluate_color_map(read_ply(request.source), read_ply(request.reference), params)
    except FusionError as e:
        logger.error(f"Evaluation failed: {e}")
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logger.error(f"Error during evaluation: {str(e)}")
        raise HTTPException(status_code=500, detail=str(e))


@router.post("/pipeline", response_model=RunReport)
def pipeline(request: PipelineRequest):
    """
    Run the fusion pipeline over a session manifest

    Args:
        request: Manifest path, optional output directory and last stage to run

    Returns:
        Run report with per-stage hashes and diagnostics
    """
    if config is None:
        raise HTTPException(status_code=500, detail="Configuration not loaded")
    if request.stop_after not in STAGES:
        raise HTTPException(status_code=422, detail=f"unknown stage '{request.stop_after}'")

    try:
        logger.info(f"Running pipeline on {request.manifest}")
        result = run_pipeline(request.manifest, config, request.out_dir, request.stop_after)
        return result.report
    except FusionError as e:
        logger.error(f"Pipeline failed: {e}")
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logger.error(f"Error running pipeline: {str(e)}")
        raise HTTPException(status_code=500, detail=str(e))
