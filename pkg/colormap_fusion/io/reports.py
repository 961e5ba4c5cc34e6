import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

from ..models.schemas import ColorMetricsReport, RunReport

logger = logging.getLogger(__name__)


def _flatten(values: Dict[str, Any], prefix: str = "") -> List[Tuple[str, Any]]:
    flat = []
    for key, value in values.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.extend(_flatten(value, f"{name}."))
        else:
            flat.append((name, value))
    return flat


def write_metrics_report(report: ColorMetricsReport, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    """
    Write metrics.txt (`name value` lines) and metrics.json

    Args:
        report: Color metrics
        out_dir: Output directory

    Returns:
        (text path, json path)
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = report.model_dump()

    text_path = out_dir / "metrics.txt"
    text_path.write_text("".join(f"{name} {value}\n" for name, value in _flatten(payload)))
    json_path = out_dir / "metrics.json"
    json_path.write_text(json.dumps(payload, indent=2) + "\n")
    logger.info(f"Metrics written to {text_path} and {json_path}")
    return text_path, json_path


def write_run_report(report: RunReport, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    """Write report.txt (one block per stage) and report.json"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    lines = []
    for stage in report.stages:
        lines.append(f"[{stage.index}] {stage.name}")
        lines.append(f"  input_hash {stage.input_hash}")
        lines.append(f"  output_hash {stage.output_hash}")
        for name, value in _flatten(stage.diagnostics):
            lines.append(f"  {name} {value}")
    for session in report.sessions:
        lines.append(f"session {session.get('session_id')}")
        for name, value in _flatten(session):
            if name != "session_id":
                lines.append(f"  {name} {value}")
    lines.append(f"output_points {report.output_points}")

    text_path = out_dir / "report.txt"
    text_path.write_text("\n".join(lines) + "\n")
    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(report.model_dump(), indent=2) + "\n")
    return text_path, json_path
