"""
Configuration management for ssmkit runs
Loads run defaults from environment variables or config file
"""

import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import yaml

OPTIMIZERS = ("Nelder-Mead", "BFGS")


def _flag(value: str) -> bool:
    return value.lower() in ("true", "1", "yes")


def _optional_int(value) -> Optional[int]:
    if value is None or value == "":
        return None
    return int(value)


@dataclass
class Config:
    """Run defaults shared by all subcommands"""

    output_dir: str = "./ssmkit-out"
    seed: Optional[int] = None  # None draws fresh entropy for every run
    nsim: int = 0  # importance draws for non-gaussian models
    threads: int = 1
    level: float = 0.95
    optimizer: str = "Nelder-Mead"
    maxiter: Optional[int] = None
    antithetics: bool = True
    log_level: str = "INFO"

    @staticmethod
    def env_is_set() -> bool:
        """Whether any SSMKIT_ variable is present"""
        return any(key.startswith("SSMKIT_") for key in os.environ)

    @classmethod
    def from_env(cls) -> "Config":
        """Load configuration from environment variables"""
        return cls(
            output_dir=os.getenv("SSMKIT_OUTPUT_DIR", "./ssmkit-out"),
            seed=_optional_int(os.getenv("SSMKIT_SEED")),
            nsim=int(os.getenv("SSMKIT_NSIM", 0)),
            threads=int(os.getenv("SSMKIT_THREADS", 1)),
            level=float(os.getenv("SSMKIT_LEVEL", 0.95)),
            optimizer=os.getenv("SSMKIT_OPTIMIZER", "Nelder-Mead"),
            maxiter=_optional_int(os.getenv("SSMKIT_MAXITER")),
            antithetics=_flag(os.getenv("SSMKIT_ANTITHETICS", "true")),
            log_level=os.getenv("SSMKIT_LOG", "INFO").upper(),
        )

    @classmethod
    def from_file(cls, config_path: Optional[Path] = None) -> "Config":
        """Load configuration from YAML file"""
        if config_path is None:
            config_path = cls.get_config_file_path()

        if not config_path.exists():
            raise FileNotFoundError(f"Config file not found: {config_path}")

        with open(config_path, "r") as f:
            data = yaml.safe_load(f) or {}

        return cls(
            output_dir=data.get("output_dir", "./ssmkit-out"),
            seed=_optional_int(data.get("seed")),
            nsim=int(data.get("nsim", 0)),
            threads=int(data.get("threads", 1)),
            level=float(data.get("level", 0.95)),
            optimizer=data.get("optimizer", "Nelder-Mead"),
            maxiter=_optional_int(data.get("maxiter")),
            antithetics=bool(data.get("antithetics", True)),
            log_level=str(data.get("log_level", "INFO")).upper(),
        )

    @staticmethod
    def get_config_file_path() -> Path:
        """Get the standard config file path"""
        config_dir = Path.home() / ".config" / "ssmkit"
        return config_dir / "config.yaml"

    @classmethod
    def load(cls) -> "Config":
        """Load configuration from multiple sources in priority order"""
        # Environment variables win when any of them is set
        if cls.env_is_set():
            return cls.from_env()

        try:
            return cls.from_file()
        except FileNotFoundError:
            pass

        return cls()

    def save_to_file(self, config_path: Optional[Path] = None):
        """Save configuration to YAML file"""
        if config_path is None:
            config_path = self.get_config_file_path()

        config_path.parent.mkdir(parents=True, exist_ok=True)

        with open(config_path, "w") as f:
            yaml.dump(asdict(self), f, default_flow_style=False)

    def validate(self) -> bool:
        """Validate the run defaults"""
        return all(
            [
                self.threads >= 1,
                0 <= self.level < 1,
                self.nsim >= 0,
                self.optimizer in OPTIMIZERS,
                self.maxiter is None or self.maxiter > 0,
            ]
        )
