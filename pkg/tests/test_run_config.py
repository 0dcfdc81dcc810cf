"""Tests for run_config, mra_errors and mra_logging."""

import json
import logging

import pytest

import mra_logging
from mra_errors import (
    EXIT_DATA,
    EXIT_NUMERIC,
    EXIT_USAGE,
    ConfigError,
    DegenerateSegmentationError,
    NiftiTruncatedError,
    NonFiniteGradientError,
    ShapeMismatchError,
    ThresholdError,
    TrainingDivergedError,
)
from run_config import RunManifest, __version__, load_json_object, manifest_path_for


class TestJson:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_json_object(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        (tmp_path / "bad.json").write_text("{not json")
        with pytest.raises(ConfigError):
            load_json_object(tmp_path / "bad.json")

    def test_not_an_object(self, tmp_path):
        (tmp_path / "list.json").write_text("[1, 2]")
        with pytest.raises(ConfigError):
            load_json_object(tmp_path / "list.json")


class TestManifest:
    def test_round_trip(self, tmp_path):
        manifest = RunManifest(command="phantom", argv=["phantom", "--count", "2"], seeds={"base_seed": 3})
        path = manifest.finish().write(tmp_path / "manifest.json")
        loaded = RunManifest.from_file(path)
        assert loaded.argv == ["phantom", "--count", "2"]
        assert loaded.seeds == {"base_seed": 3}
        assert loaded.tool_version == __version__
        assert loaded.finished_at is not None

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"command": "x", "argv": [], "colour": "red"}))
        with pytest.raises(ConfigError, match="colour"):
            RunManifest.from_file(path)

    def test_missing_argv(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"command": "x"}))
        with pytest.raises(ConfigError):
            RunManifest.from_file(path)

    def test_manifest_location(self, tmp_path):
        assert manifest_path_for(tmp_path) == tmp_path / "manifest.json"
        assert manifest_path_for(tmp_path / "r.nii.gz") == tmp_path / "r.nii.gz.manifest.json"


class TestErrors:
    def test_exit_codes(self):
        assert ConfigError("x").exit_code == EXIT_USAGE
        assert NiftiTruncatedError("x").exit_code == EXIT_DATA
        assert NonFiniteGradientError("x").exit_code == EXIT_NUMERIC
        assert TrainingDivergedError("x").exit_code == EXIT_NUMERIC

    def test_value_error_compatible(self):
        assert isinstance(ShapeMismatchError("x"), ValueError)
        assert isinstance(DegenerateSegmentationError("x"), ThresholdError)

    def test_details_in_message(self):
        err = ConfigError("bad value", key="batch_size")
        assert err.details == {"key": "batch_size"}
        assert "batch_size" in str(err)

    def test_diverged_keeps_params(self):
        assert TrainingDivergedError("nan", best_params="p", epoch=3).best_params == "p"


class TestLogging:
    def test_level_from_environment(self, monkeypatch):
        monkeypatch.setenv(mra_logging.LOG_LEVEL_ENV, "debug")
        assert mra_logging.resolve_level() == logging.DEBUG

    def test_argument_wins(self, monkeypatch):
        monkeypatch.setenv(mra_logging.LOG_LEVEL_ENV, "debug")
        assert mra_logging.resolve_level("warning") == logging.WARNING

    def test_unknown_level(self, monkeypatch):
        monkeypatch.delenv(mra_logging.LOG_LEVEL_ENV, raising=False)
        assert mra_logging.resolve_level("chatty") == logging.INFO

    def test_idempotent(self):
        mra_logging.configure_logging("INFO")
        handlers = len(logging.getLogger().handlers)
        mra_logging.configure_logging("DEBUG")
        assert len(logging.getLogger().handlers) == handlers
        assert logging.getLogger().level == logging.DEBUG
