"""Tests for rest-adapt CLI module."""

import json

import pytest
import yaml
from click.testing import CliRunner

from rest_adapt.adapt import RunReport
from rest_adapt.cli import main, run
from rest_adapt.cli_format import format_json, format_report_table, format_report_tsv
from rest_adapt.eegpack.pack import MANIFEST_NAME

TINY_RUN = {
    "synth": {"n_subjects": 3, "trials_per_class": 4, "rs_trials_per_subject": 2, "channels": 3, "snr": 3.0},
    "preprocess": {"target_fs": 125},
    "model": {"f1": 4, "depth": 2, "f2": 8, "kern_length": 32, "separable_length": 8, "dropout": 0.0},
    "train": {"epochs": 2, "batch_size": 8},
    "calibrate": {"steps": 3},
    "adapt": {"epochs": 1, "batch_size": 8},
    "targets": ["S1"],
    "output_dir": "run",
    "sweep_fractions": [0.5, 1.0],
    "export_real_per_subject": 4,
}


@pytest.fixture
def runner():
    """Create a CLI runner."""
    return CliRunner()


@pytest.fixture
def config_file(tmp_path):
    """Write a tiny synthetic run configuration."""
    path = tmp_path / "run.yaml"
    path.write_text(yaml.dump(TINY_RUN))
    return path


class TestMainCommand:
    """Tests for the command group."""

    def test_version(self, runner):
        """Test that --version flag prints version and exits cleanly."""
        result = runner.invoke(main, ["--version"])
        assert result.exit_code == 0
        assert "0.1.0" in result.output

    def test_help(self, runner):
        """Test that --help lists the stage commands."""
        result = runner.invoke(main, ["--help"])
        assert result.exit_code == 0
        for command in ("train", "calibrate", "adapt", "eval", "pipeline", "sweep", "ablation", "export-features", "gradcheck"):
            assert command in result.output

    def test_missing_config_file(self, runner, tmp_path):
        """Test that a missing config file exits with code 1 and names the path."""
        result = runner.invoke(main, ["-C", str(tmp_path / "nope.yaml"), "validate"])
        assert result.exit_code == 1
        assert "nope.yaml" in result.output


class TestValidateCommand:
    """Tests for the validate command."""

    def test_prints_normalized_config(self, runner, config_file):
        """Test that defaults are filled in and relative paths resolved."""
        result = runner.invoke(main, ["-C", str(config_file), "validate"])
        assert result.exit_code == 0
        assert '"gamma2": 10.0' in result.output
        assert str(config_file.parent / "run") in result.output

    def test_lists_every_violation(self, runner, tmp_path):
        """Test that an invalid config exits with code 1 and lists each violation."""
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.dump({"calibrate": {"gamma2": -1, "gamma3": 1}}))
        result = runner.invoke(main, ["-C", str(path), "validate"])
        assert result.exit_code == 1
        assert "calibrate.gamma2" in result.output
        assert "calibrate.gamma3" in result.output


class TestStageCommands:
    """Tests for the commands that run pipeline stages."""

    def test_synth_writes_pack(self, runner, config_file, tmp_path):
        """Test that synth writes a pack to --out."""
        result = runner.invoke(main, ["-C", str(config_file), "synth", "--out", str(tmp_path / "pack")])
        assert result.exit_code == 0
        assert (tmp_path / "pack" / MANIFEST_NAME).is_file()
        assert "3 subjects" in result.output

    def test_unknown_target(self, runner, config_file):
        """Test that an unknown --target exits with the data error code."""
        result = runner.invoke(main, ["-C", str(config_file), "train", "--target", "S9"])
        assert result.exit_code == 2
        assert "S9" in result.output

    def test_target_and_all_subjects_exclusive(self, runner, config_file):
        """Test that --target and --all-subjects cannot be combined."""
        result = runner.invoke(main, ["-C", str(config_file), "train", "-t", "S1", "--all-subjects"])
        assert result.exit_code == 1

    def test_bad_sweep_fractions(self, runner, config_file):
        """Test that a fraction outside (0, 1] is a configuration error."""
        result = runner.invoke(main, ["-C", str(config_file), "sweep", "--fractions", "0,2"])
        assert result.exit_code == 1
        assert "--fractions" in result.output

    def test_pipeline_writes_report(self, runner, config_file):
        """Test that the pipeline command runs every stage and writes report.json / report.tsv."""
        result = runner.invoke(main, ["-C", str(config_file), "pipeline"])
        assert result.exit_code == 0, result.output
        run_dir = config_file.parent / "run"
        report = json.loads((run_dir / "report.json").read_text())
        assert [s["subject"] for s in report["subjects"]] == ["S1"]
        assert 0.0 <= report["subjects"][0]["accuracy"] <= 1.0
        assert (run_dir / "report.tsv").read_text().startswith("subject\t")
        assert (run_dir / "config.json").is_file()
        assert (run_dir / "S1" / "stage1.ckpt").is_file()
        assert (run_dir / "S1" / "adapted.ckpt").is_file()
        assert "S1" in result.output

    def test_stage_by_stage(self, runner, config_file):
        """Test train, calibrate, adapt and eval as separate invocations."""
        base = ["-C", str(config_file)]
        assert runner.invoke(main, base + ["train"]).exit_code == 0
        calibrate = runner.invoke(main, base + ["calibrate", "--method", "deepdream", "--init", "noise"])
        assert calibrate.exit_code == 0, calibrate.output
        assert "class counts [10, 10]" in calibrate.output
        assert runner.invoke(main, base + ["adapt"]).exit_code == 0
        result = runner.invoke(main, base + ["eval"])
        assert result.exit_code == 0, result.output
        assert "stage-1 accuracy" in result.output
        assert "adapted accuracy" in result.output

    def test_sweep_and_export(self, runner, config_file):
        """Test that sweep and export-features write their artifacts."""
        base = ["-C", str(config_file)]
        sweep = runner.invoke(main, base + ["sweep", "--fractions", "0.5,1.0"])
        assert sweep.exit_code == 0, sweep.output
        assert "RS-fraction sweep for S1" in sweep.output
        export = runner.invoke(main, base + ["export-features"])
        assert export.exit_code == 0, export.output
        subject_dir = config_file.parent / "run" / "S1"
        assert (subject_dir / "sweep.json").is_file()
        assert (subject_dir / "features.tsv").is_file()
        assert "proto_agreement" in json.loads((subject_dir / "features_metrics.json").read_text())

    def test_gradcheck_passes(self, runner, config_file):
        """Test that the gradient check of both composites passes at the default tolerance."""
        result = runner.invoke(main, ["-C", str(config_file), "gradcheck", "--param-coords", "50", "--input-coords", "30"])
        assert result.exit_code == 0, result.output
        assert "parameters" in result.output and "input" in result.output
        assert "FAIL" not in result.output

    def test_gradcheck_tolerance_failure(self, runner, config_file):
        """Test that an impossible tolerance exits with the numerical error code."""
        result = runner.invoke(main, ["-C", str(config_file), "gradcheck", "--param-coords", "5", "--input-coords", "5", "--tolerance",
                                      "-1"])
        assert result.exit_code == 3

    def test_uncreatable_output_dir(self, runner, tmp_path):
        """Test that an output_dir below a regular file exits with the data error code and names the path."""
        (tmp_path / "blocker").write_text("")
        path = tmp_path / "blocked.yaml"
        path.write_text(yaml.dump({**TINY_RUN, "output_dir": "blocker/out"}))
        result = runner.invoke(main, ["-C", str(path), "train", "-t", "S1"])
        assert result.exit_code == 2, result.output
        assert "blocker" in result.output
        assert result.exception is None or isinstance(result.exception, SystemExit)


class TestRunFunction:
    """Tests for the run() exit-code wrapper."""

    def test_version_returns_zero(self):
        """Test that a clean invocation returns 0."""
        assert run(["--version"]) == 0

    def test_config_error_returns_one(self, tmp_path):
        """Test that a configuration error returns 1."""
        assert run(["-C", str(tmp_path / "missing.yaml"), "validate"]) == 1

    def test_usage_error_returns_two(self):
        """Test that an unknown command returns click's usage error code."""
        assert run(["no-such-command"]) == 2

    def test_unwritable_output_returns_two(self, tmp_path):
        """Test that a write failure under output_dir returns 2 rather than raising."""
        (tmp_path / "blocker").write_text("")
        path = tmp_path / "blocked.yaml"
        path.write_text(yaml.dump({**TINY_RUN, "output_dir": "blocker/out"}))
        assert run(["-C", str(path), "pipeline"]) == 2


class TestFormatting:
    """Tests for output formatting helpers."""

    def test_json_replaces_non_finite(self):
        """Test that NaN and infinity are written as null."""
        assert json.loads(format_json({"a": float("nan"), "b": [1.0, float("inf")]})) == {"a": None, "b": [1.0, None]}

    def test_empty_report(self):
        """Test the table and TSV of a report without subjects."""
        report = RunReport(seed=0)
        assert format_report_table(report) == "No subjects evaluated."
        assert format_report_tsv(report).count("\n") == 1
