"""
tests/test_config.py
설정 병합 우선순위와 검증 테스트
"""

from pathlib import Path

import pytest
from pydantic import ValidationError

from app.core.config import BstConfig, RunConfig, load_run_config, read_config_file
from app.core.exceptions import ConfigError
from tests import write_tiny_config


class TestPrecedence:
    """기본값 < 환경변수 < 설정 파일 < 플래그"""

    def test_defaults(self):
        config = load_run_config()
        assert config.seed == 42
        assert config.model.num_blocks == 1
        assert config.model.d_model == 32

    def test_env_over_default(self, monkeypatch):
        monkeypatch.setenv("BST_MODEL__NUM_BLOCKS", "2")
        monkeypatch.setenv("BST_SEED", "5")
        config = load_run_config()
        assert config.model.num_blocks == 2
        assert config.seed == 5

    def test_file_over_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("BST_SEED", "5")
        monkeypatch.setenv("BST_TRAIN__EPOCHS", "3")
        config = load_run_config(write_tiny_config(tmp_path, seed=11))
        assert config.seed == 11
        # 파일에 없는 값은 환경변수 유지
        assert config.train.epochs == 3
        assert config.model.sequence_length == 5

    def test_flags_over_file(self, tmp_path):
        config = load_run_config(
            write_tiny_config(tmp_path),
            {"seed": 3, "model": {"num_heads": 4, "readout": None}, "paths": {"run_dir": None}},
        )
        assert config.seed == 3
        assert config.model.num_heads == 4
        assert config.model.item_dim == 4
        assert config.paths.run_dir is None

    def test_with_overrides(self):
        config = RunConfig().with_overrides(model={"num_blocks": 3}, seed=9)
        assert config.model.num_blocks == 3
        assert config.model.num_heads == 8
        assert config.seed == 9


class TestValidation:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="존재하지"):
            read_config_file(tmp_path / "missing.toml")

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[model]\nnum_layers = 2\n", encoding="utf-8")
        with pytest.raises(ValidationError):
            load_run_config(path)

    def test_bad_log_level(self):
        with pytest.raises(ValidationError):
            load_run_config(overrides={"logging": {"level": "LOUD"}})

    def test_heads_divide_width(self):
        with pytest.raises(ValidationError):
            BstConfig(item_dim=5, category_dim=1, position_dim=1, num_heads=3)


class TestEcho:
    def test_echo_excludes_location_and_logging(self, tmp_path):
        config = load_run_config(write_tiny_config(tmp_path), {"paths": {"run_dir": tmp_path / "run"}})
        echo = config.echo()
        assert "paths" not in echo and "logging" not in echo
        assert echo["seed"] == 7
        assert echo["model"]["sequence_length"] == 5

    def test_echo_is_stable_across_run_dirs(self, tmp_path):
        a = load_run_config(overrides={"paths": {"run_dir": tmp_path / "a"}})
        b = load_run_config(overrides={"paths": {"run_dir": tmp_path / "b"}})
        assert a.echo() == b.echo()

    def test_shipped_default_file_matches_defaults(self):
        path = Path(__file__).resolve().parents[1] / "configs" / "default.toml"
        assert load_run_config(path).echo() == RunConfig().echo()
