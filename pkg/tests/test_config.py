"""
Basic tests for configuration module
"""

import os
from pathlib import Path

from src.config import Config


def test_config_from_env(monkeypatch):
    """Test loading config from environment variables"""
    monkeypatch.setenv("SSMKIT_OUTPUT_DIR", "/tmp/out")
    monkeypatch.setenv("SSMKIT_SEED", "42")
    monkeypatch.setenv("SSMKIT_NSIM", "250")
    monkeypatch.setenv("SSMKIT_THREADS", "4")
    monkeypatch.setenv("SSMKIT_LEVEL", "0.9")
    monkeypatch.setenv("SSMKIT_OPTIMIZER", "BFGS")
    monkeypatch.setenv("SSMKIT_ANTITHETICS", "no")
    monkeypatch.setenv("SSMKIT_LOG", "debug")

    config = Config.from_env()

    assert config.output_dir == "/tmp/out"
    assert config.seed == 42
    assert config.nsim == 250
    assert config.threads == 4
    assert config.level == 0.9
    assert config.optimizer == "BFGS"
    assert config.antithetics is False
    assert config.log_level == "DEBUG"
    assert config.maxiter is None


def test_config_validation():
    """Test config validation"""
    assert Config().validate() is True

    # Invalid thread count
    assert Config(threads=0).validate() is False

    # Level must lie in [0, 1)
    assert Config(level=1.0).validate() is False

    # Unknown optimizer
    assert Config(optimizer="simplex").validate() is False


def test_config_get_file_path():
    """Test getting config file path"""
    path = Config.get_config_file_path()
    assert isinstance(path, Path)
    assert path.name == "config.yaml"
    assert "ssmkit" in str(path)


def test_config_file_round_trip(tmp_path):
    """Test saving and loading a YAML config file"""
    path = tmp_path / "nested" / "config.yaml"
    Config(seed=7, nsim=100, maxiter=500).save_to_file(path)

    config = Config.from_file(path)

    assert config.seed == 7
    assert config.nsim == 100
    assert config.maxiter == 500
    assert config.optimizer == "Nelder-Mead"


def test_config_load_prefers_env(monkeypatch, tmp_path):
    """Test that environment variables take precedence over the file"""
    monkeypatch.setattr(Config, "get_config_file_path", staticmethod(lambda: tmp_path / "c.yaml"))
    for key in list(os.environ):
        if key.startswith("SSMKIT_"):
            monkeypatch.delenv(key)
    Config(nsim=10).save_to_file(tmp_path / "c.yaml")

    assert Config.load().nsim == 10

    monkeypatch.setenv("SSMKIT_NSIM", "20")
    assert Config.load().nsim == 20


def test_config_load_defaults(monkeypatch, tmp_path):
    """Test fallback to built-in defaults"""
    monkeypatch.setattr(
        Config, "get_config_file_path", staticmethod(lambda: tmp_path / "missing.yaml")
    )
    for key in list(os.environ):
        if key.startswith("SSMKIT_"):
            monkeypatch.delenv(key)

    assert Config.load() == Config()
