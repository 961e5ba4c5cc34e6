import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Type, TypeVar

from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from .config import load_config
from .errors import EXIT_OK, EXIT_USAGE, ConfigError, FusionError
from .evaluation.color_metrics import evaluate_color_map
from .io.ply import read_ply
from .io.reports import write_metrics_report
from .models.schemas import SyntheticSceneSpec
from .pipeline.ablation import AblationSpec, run_ablation
from .pipeline.runner import run_pipeline
from .pipeline.synthetic import generate_synthetic_scene, write_scene

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)

# Last pipeline stage executed by each staged subcommand
_STOP_AFTER = {
    "prefuse": "outlier_repair",
    "register": "registration",
    "optimize": "pose_graph",
    "pipeline": "propagate",
}


class _ArgumentParser(argparse.ArgumentParser):
    """Reports usage errors with the toolkit's usage exit code"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(parser: argparse.ArgumentParser, manifest: bool = True):
    # Accepted everywhere, only the staged subcommands read it
    parser.add_argument(
        "--manifest", type=Path, required=manifest,
        help="Session manifest file" if manifest else "Session manifest file (unused)"
    )
    parser.add_argument("--config", type=Path, help="Config file with 'section.key = value' lines")
    parser.add_argument("--out", type=Path, default=Path("out"), help="Output directory")
    parser.add_argument("--seed", type=int, help="Random seed")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="colormap-fusion", description="Colored multi-session map fusion")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    synth = commands.add_parser("synth", help="Generate a synthetic scene and its manifest")
    _common(synth, manifest=False)
    synth.add_argument("--sessions", type=int, help="Number of sessions")
    synth.add_argument("--frames", type=int, help="Frames per session")
    synth.add_argument("--no-outlier", action="store_true", help="Generate no scale-outlier session")

    for name, text in (
        ("prefuse", "Timestamp pairing, Umeyama alignment and scale consensus"),
        ("register", "Pre-fusion followed by regularized Sim(3) ICP"),
        ("optimize", "Registration followed by pose graph optimization"),
        ("pipeline", "All stages, writing the global colored cloud"),
    ):
        sub = commands.add_parser(name, help=text)
        _common(sub)
        sub.add_argument("--beta", type=float, help="Scale regularization strength in [0, 1]")

    evaluate = commands.add_parser("evaluate", help="Color metrics of a map against a reference")
    _common(evaluate, manifest=False)
    evaluate.add_argument("--ref", type=Path, required=True, help="Reference PLY")
    evaluate.add_argument("--cloud", type=Path, help="Map to score, default <out>/global_cloud.ply")
    evaluate.add_argument("--tau", type=float, help="Color tolerance")
    evaluate.add_argument("--rg", type=float, help="Geometric neighbourhood radius in meters")
    evaluate.add_argument("--voxel", type=float, help="Voxel size in meters")

    ablate = commands.add_parser("ablate", help="Scale regularization ablation")
    _common(ablate, manifest=False)
    ablate.add_argument("--trials", type=int, default=100, help="Number of seeded trials")
    return parser


def _from_arguments(model: Type[M], **values) -> M:
    try:
        return model(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid arguments: {e}") from e


def _synth(args) -> None:
    values = {"seed": args.seed, "session_count": args.sessions, "frames_per_session": args.frames}
    values = {k: v for k, v in values.items() if v is not None}
    if args.no_outlier:
        values["outlier_session"] = None
    scene = generate_synthetic_scene(_from_arguments(SyntheticSceneSpec, **values))
    manifest = write_scene(scene, args.out)
    print(manifest)


def _staged(args) -> None:
    config = load_config(args.config, seed=args.seed, **{"postfusion.beta": args.beta})
    result = run_pipeline(args.manifest, config, args.out, stop_after=_STOP_AFTER[args.command])
    for session in result.report.sessions:
        print(json.dumps(session))


def _evaluate(args) -> None:
    config = load_config(
        args.config,
        seed=args.seed,
        **{"evaluation.tau": args.tau, "evaluation.r_g": args.rg, "evaluation.voxel_size": args.voxel},
    )
    cloud_path = args.cloud or args.out / "global_cloud.ply"
    report = evaluate_color_map(read_ply(cloud_path), read_ply(args.ref), config.evaluation.metric_parameters())
    write_metrics_report(report, args.out)
    print(f"CD {report.cd:.6f}  CF {report.cf:.3f} dB  LCR {report.lcr:.4f}  CCS {report.ccs:.6f}")


def _ablate(args) -> None:
    spec = _from_arguments(AblationSpec, trials=args.trials, seed=args.seed or 0)
    report = run_ablation(spec)
    args.out.mkdir(parents=True, exist_ok=True)
    payload = {
        "summary": report.summary(),
        "spec": spec.model_dump(),
        "trials": [t.model_dump() for t in report.trials],
    }
    (args.out / "ablation.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(json.dumps(report.summary()))


_HANDLERS = {
    "synth": _synth,
    "prefuse": _staged,
    "register": _staged,
    "optimize": _staged,
    "pipeline": _staged,
    "evaluate": _evaluate,
    "ablate": _ablate,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    Command-line entry point

    Args:
        argv: Arguments without the program name, sys.argv[1:] when omitted

    Returns:
        Process exit code: 0 success, 1 usage, 2 data, 3 numerical failure
    """
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    try:
        _HANDLERS[args.command](args)
    except FusionError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
