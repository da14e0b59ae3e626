import json
from pathlib import Path

import pytest

from config import (
    ENV_KEYS,
    build_run_config,
    describe_config,
    env_values,
    file_values,
)
from errors import ConfigurationError


@pytest.fixture(autouse=True)
def _clean_multer_env(monkeypatch):
    """Remove all MULTER_* env vars so built-in defaults are exercised."""
    for key in list(ENV_KEYS) + ["MULTER_LOG_LEVEL"]:
        monkeypatch.delenv(key, raising=False)


class TestEnvValues:
    def test_empty_when_nothing_set(self):
        assert env_values() == {}

    def test_maps_env_names_to_keys(self, monkeypatch):
        monkeypatch.setenv("MULTER_SEED", "11")
        monkeypatch.setenv("MULTER_K", "16")
        assert env_values() == {"seed": "11", "k": "16"}


class TestFileValues:
    def test_none_path(self):
        assert file_values(None) == {}

    def test_reads_flat_key_values(self, tmp_path):
        path = tmp_path / "run.env"
        path.write_text("epochs=5\nflip-prob=0.25\n# comment\nlevels=1,4\n")
        assert file_values(path) == {"epochs": "5", "flip_prob": "0.25", "levels": "1,4"}

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "run.env"
        path.write_text("epochz=5\n")
        with pytest.raises(ConfigurationError, match="epochz"):
            file_values(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            file_values(tmp_path / "none.env")


class TestBuildRunConfig:
    def test_synth_defaults(self):
        run = build_run_config("train", {})
        assert run.is_synth
        assert run.model.num_codewords == 4
        assert run.model.out_dim == 32
        assert run.model.levels == (1, 2, 3, 4)
        assert run.model.num_classes == 4
        assert run.training.batch_size == 16
        assert run.training.crop_size == 64
        assert run.training.resize_size == 73
        assert run.output_dir == Path("runs")

    def test_directory_defaults_follow_published_protocol(self, tmp_path):
        run = build_run_config("train", {"data": str(tmp_path)})
        assert not run.is_synth
        assert (run.model.num_codewords, run.model.out_dim) == (8, 128)
        assert run.training.batch_size == 32
        assert (run.training.resize_size, run.training.crop_size) == (256, 224)

    def test_precedence(self, monkeypatch, tmp_path):
        monkeypatch.setenv("MULTER_EPOCHS", "7")
        monkeypatch.setenv("MULTER_SEED", "3")
        monkeypatch.setenv("MULTER_LR", "0.5")
        path = tmp_path / "run.env"
        path.write_text("epochs=9\nseed=4\n")

        run = build_run_config("train", {"epochs": 11, "lr": None}, path)
        assert run.training.epochs == 11
        assert run.training.seed == 4
        assert run.training.base_lr == 0.5

    def test_levels_from_env(self, monkeypatch):
        monkeypatch.setenv("MULTER_LEVELS", "4,2")
        assert build_run_config("train", {}).model.levels == (2, 4)

    def test_full_size_backbone(self):
        run = build_run_config("train", {"full_size": True})
        assert run.model.backbone.widths == (64, 128, 256, 512)

    def test_custom_widths(self):
        run = build_run_config("train", {"widths": "4,8,8,8", "stem_channels": 4})
        assert run.model.backbone.widths == (4, 8, 8, 8)

    def test_invalid_number(self):
        with pytest.raises(ConfigurationError, match="epochs"):
            build_run_config("train", {"epochs": "ten"})

    def test_invalid_levels(self):
        with pytest.raises(ConfigurationError):
            build_run_config("train", {"levels": "5"})

    def test_lenient_workers(self, monkeypatch):
        monkeypatch.setenv("MULTER_WORKERS", "0")
        assert build_run_config("train", {}).training.workers == 1

    def test_model_path(self):
        run = build_run_config("eval", {"model": "runs/m.npz"})
        assert run.model_path == Path("runs/m.npz")


class TestDescribeConfig:
    def test_is_json_serializable(self):
        payload = describe_config(build_run_config("train", {}))
        text = json.dumps(payload, sort_keys=True)
        assert '"command": "train"' in text
        assert payload["model_path"] is None
