import os

import pytest
from click.testing import CliRunner
from conftest import BGL_SAMPLE

from log_ctdg import json
from log_ctdg.__main__ import main
from log_ctdg.harness import read_report

SMALL_RUN = """\
seed: 2
synth:
  n_templates: 10
  n_events: 800
  anomaly_rate: 0.02
model:
  memory_dim: 8
  time_dim: 4
  head_hidden: 8
  neighbors: 3
train:
  epochs: 1
  batch_size: 100
"""


def _blob(result):
    """The JSON blob a command prints, ignoring any log lines around it."""
    text = result.stdout
    start = text.index('{\n "command"')
    end = text.rindex("\n}") + 2
    return json.loads(text[start:end])


@pytest.fixture
def runner():
    return CliRunner()


def test_help(runner):
    result = runner.invoke(main, ["--help"])
    assert result.exit_code == 0
    for command in ("parse", "embed", "build", "train", "detect", "eval", "pipeline", "synth"):
        assert command in result.output


def test_synth_command(runner, tmp_path):
    path = str(tmp_path / "gen.log")
    result = runner.invoke(
        main,
        [
            "synth",
            "-o",
            path,
            "--n-events",
            "500",
            "--n-templates",
            "10",
            "--anomaly-rate",
            "0.02",
            "--seed",
            "3",
            "--mix",
            "gap=1",
        ],
    )
    assert result.exit_code == 0, result.output
    blob = _blob(result)
    assert blob["command"] == "synth"
    assert blob["data"]["events"] == 500
    assert blob["data"]["anomalies"] == 10
    assert blob["data"]["kinds"] == {"transition": 0, "gap": 10, "burst": 0}
    with open(path) as fp:
        assert len(fp.read().splitlines()) == 500


@pytest.mark.parametrize(
    "args",
    [
        ["synth", "-o", "x.log", "--mix", "gap=lots"],
        ["parse", "--hops", "0,x"],
        ["parse", "--log-level", "loud"],
    ],
)
def test_bad_options(runner, args):
    result = runner.invoke(main, args)
    assert result.exit_code == 2


def test_parse_command_on_bgl(runner, tmp_path):
    out_dir = str(tmp_path / "bgl")
    result = runner.invoke(
        main, ["parse", "--data", BGL_SAMPLE, "--format", "bgl", "--out-dir", out_dir]
    )
    assert result.exit_code == 0, result.output
    blob = _blob(result)
    assert blob["command"] == "parse"
    assert blob["data"]["n_records"] == 21
    assert blob["data"]["rejected"] == 2
    saved = json.load_path(os.path.join(out_dir, "config.json"))
    assert saved["data"]["path"] == BGL_SAMPLE


def test_stage_failure_reports_error(runner, tmp_path):
    out_dir = str(tmp_path / "empty")
    result = runner.invoke(main, ["build", "--out-dir", out_dir])
    assert result.exit_code == 1
    blob = _blob(result)
    assert blob["data"] is None
    assert "StageError" in blob["error"]
    assert "Traceback" in blob["traceback"]


def test_pipeline_then_single_stage(runner, tmp_path):
    config_path = tmp_path / "run.yaml"
    config_path.write_text(SMALL_RUN)
    out_dir = str(tmp_path / "run")
    result = runner.invoke(
        main, ["pipeline", "--config", str(config_path), "--out-dir", out_dir, "--hops", "0,1"]
    )
    assert result.exit_code == 0, result.output
    data = _blob(result)["data"]
    assert set(data) == {"parse", "embed", "build", "train", "detect", "eval"}
    assert data["parse"]["n_records"] == 800
    saved = json.load_path(os.path.join(out_dir, "config.json"))
    assert saved["train"]["hop_set"] == [0, 1]
    assert saved["seed"] == 2

    # later stages pick the resolved config up from the output directory
    os.remove(os.path.join(out_dir, "report.json"))
    result = runner.invoke(main, ["eval", "--out-dir", out_dir])
    assert result.exit_code == 0, result.output
    report = read_report(os.path.join(out_dir, "report.json"))
    assert _blob(result)["data"]["f1"] == report.f1 == data["eval"]["f1"]

    result = runner.invoke(main, ["detect", "--out-dir", out_dir, "--threshold", "0.2"])
    assert result.exit_code == 0, result.output
    assert _blob(result)["data"]["verdicts"] == 400
