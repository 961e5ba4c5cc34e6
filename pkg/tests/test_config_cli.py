import json
from pathlib import Path

import pytest
from pydantic import ValidationError

from conftest import random_cloud

import colormap_fusion.cli as cli
from colormap_fusion.cli import build_parser, main
from colormap_fusion.config import K_SIGMA, PipelineConfig, load_config, parse_config_text
from colormap_fusion.errors import EXIT_DATA, EXIT_OK, EXIT_USAGE, ConfigError
from colormap_fusion.io.ply import write_ply
from colormap_fusion.models.schemas import SyntheticSceneSpec

DEFAULT_CONFIG = Path(__file__).parent.parent / "data" / "pipeline.conf"


def test_parse_config_text():
    """Test flat keys nest into sections and comments are dropped"""
    values = parse_config_text("seed = 4  # run seed\n\npostfusion.beta = 0.3\npgo.strict = true\n")
    assert values == {"seed": "4", "postfusion": {"beta": "0.3"}, "pgo": {"strict": "true"}}

    with pytest.raises(ConfigError):
        parse_config_text("postfusion.beta 0.3\n")
    with pytest.raises(ConfigError):
        parse_config_text("a.b.c = 1\n")


def test_default_config_file_matches_defaults():
    """Test the shipped config file spells out the built-in defaults"""
    assert load_config(DEFAULT_CONFIG).model_dump() == PipelineConfig().model_dump()


def test_load_config_overrides(tmp_path):
    """Test file values, dotted overrides and skipped None overrides"""
    path = tmp_path / "run.conf"
    path.write_text("seed = 7\npostfusion.beta = 0.25\n")
    config = load_config(path, **{"postfusion.beta": 0.5, "evaluation.tau": None})

    assert config.seed == 7
    assert config.postfusion.beta == 0.5
    assert config.evaluation.tau == 0.1
    assert config.prefusion.k_sigma == K_SIGMA


def test_load_config_rejects_bad_values(tmp_path):
    """Test unknown keys, out-of-range values and missing files"""
    unknown = tmp_path / "unknown.conf"
    unknown.write_text("postfusion.gamma = 1\n")
    out_of_range = tmp_path / "range.conf"
    out_of_range.write_text("postfusion.beta = 1.5\n")

    for path in (unknown, out_of_range, tmp_path / "absent.conf"):
        with pytest.raises(ConfigError):
            load_config(path)


def test_load_config_from_environment(monkeypatch):
    """Test nested settings read from FUSION_ environment variables"""
    monkeypatch.setenv("FUSION_POSTFUSION__BETA", "0.3")
    monkeypatch.setenv("FUSION_WORKERS", "2")
    config = load_config()

    assert config.postfusion.beta == 0.3
    assert config.workers == 2


def test_parser_subcommands():
    """Test staged subcommands share the common options"""
    args = build_parser().parse_args(["register", "--manifest", "m.txt", "--beta", "0.2", "--seed", "3"])
    assert args.command == "register"
    assert args.manifest == Path("m.txt")
    assert args.beta == 0.2
    assert args.out == Path("out")


@pytest.mark.parametrize("command", [["synth"], ["evaluate", "--ref", "r.ply"], ["ablate"]])
def test_parser_accepts_manifest_on_every_subcommand(command):
    """Test --manifest is optional outside the staged subcommands"""
    parser = build_parser()
    assert parser.parse_args(command + ["--manifest", "m.txt"]).manifest == Path("m.txt")
    assert parser.parse_args(command).manifest is None


def test_cli_usage_errors(tmp_path):
    """Test bad arguments exit with the usage code"""
    assert main([]) == EXIT_USAGE
    assert main(["pipeline"]) == EXIT_USAGE
    assert main(["pipeline", "--manifest", "m.txt", "--beta", "high"]) == EXIT_USAGE
    assert main(["synth", "--out", str(tmp_path), "--frames", "2"]) == EXIT_USAGE
    assert main(["ablate", "--out", str(tmp_path), "--trials", "0"]) == EXIT_USAGE
    assert not (tmp_path / "ablation.json").exists()


def test_cli_missing_manifest(tmp_path, capsys):
    """Test a missing manifest exits with the data error code"""
    code = main(["pipeline", "--manifest", str(tmp_path / "absent.txt"), "--out", str(tmp_path)])

    assert code == EXIT_DATA
    assert "absent.txt" in capsys.readouterr().err


def test_cli_bad_config_value(tmp_path):
    """Test an out-of-range beta is a usage error"""
    assert main(["pipeline", "--manifest", "m.txt", "--beta", "2.0", "--out", str(tmp_path)]) == EXIT_USAGE


def test_cli_stage_validation_error_is_not_a_usage_error(tmp_path, monkeypatch):
    """Test a model validation failure inside a stage is not reported as bad arguments"""

    def failing_stage(*args, **kwargs):
        return SyntheticSceneSpec(frames_per_session=2)

    monkeypatch.setattr(cli, "run_pipeline", failing_stage)
    with pytest.raises(ValidationError):
        main(["pipeline", "--manifest", "m.txt", "--out", str(tmp_path)])


def test_cli_evaluate(tmp_path, rng, capsys):
    """Test evaluate scores a cloud and writes the metrics report"""
    truth = write_ply(random_cloud(rng, 300, extent=2.0), tmp_path / "truth.ply")
    code = main(["evaluate", "--ref", str(truth), "--cloud", str(truth), "--out", str(tmp_path / "eval"), "--tau", "0.05"])

    assert code == EXIT_OK
    assert capsys.readouterr().out.startswith("CD 0.000000")
    metrics = json.loads((tmp_path / "eval" / "metrics.json").read_text())
    assert metrics["cd"] == 0.0
    assert metrics["lcr"] == 1.0
    assert metrics["parameters"]["tau"] == 0.05


@pytest.mark.slow
def test_cli_synth_then_pipeline(tmp_path, capsys):
    """Test generating a scene and running every stage from the command line"""
    scene = tmp_path / "scene"
    assert main(["synth", "--out", str(scene), "--sessions", "2", "--frames", "8", "--seed", "1"]) == EXIT_OK
    manifest = Path(capsys.readouterr().out.strip())
    assert manifest == scene / "manifest.txt"

    out = tmp_path / "out"
    assert main(["pipeline", "--manifest", str(manifest), "--out", str(out), "--config", str(DEFAULT_CONFIG)]) == EXIT_OK
    sessions = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [s["session_id"] for s in sessions] == [0, 1]
    assert (out / "global_cloud.ply").is_file()

    assert main(["evaluate", "--ref", str(scene / "ground_truth.ply"), "--out", str(out)]) == EXIT_OK
    assert (out / "metrics.txt").is_file()
