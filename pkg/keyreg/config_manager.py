"""Configuration management for keyreg experiments."""

import json
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, Optional

from .augment import TrainConfig
from .errors import ConfigError
from .register import RansacConfig, RegisterConfig
from .utils import stable_hash


def parse_budget(value: Any) -> Optional[int]:
    """Budget from a flag or config value; "unlimited" gives None."""
    if value is None or str(value).lower() == "unlimited":
        return None
    try:
        budget = int(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Budget must be an integer or 'unlimited', got {value!r}") from e
    if budget < 1:
        raise ConfigError("Budget must be >= 1")
    return budget


class ConfigManager:
    """Manages experiment configuration.

    Configuration files are flat JSON objects; loaded values are merged over
    ``DEFAULT_CONFIG`` and command-line flags are applied on top.
    """

    CONFIG_FILE = "keyreg.json"

    DEFAULT_CONFIG = {
        # Detection
        "detector": "harris",
        "budget": 500,  # int target, or "unlimited"
        "sensitivity": None,  # None = calibrate to the budget
        "nms_radius": 3.0,
        "vessel_kp": None,  # "all", "skeleton", "canny", "skeleton+canny", "subsample:K"
        "gray_mode": "green",
        "calibration_iterations": 40,
        "external_native": False,  # external keypoint files are at native resolution
        # Description
        "checkpoint": None,  # None = patch descriptor
        "patch_size": 11,
        "working_size": 565,
        "roi_margin": 4,
        # RANSAC
        "ransac_threshold": 3.0,
        "ransac_max_iterations": 5000,
        "ransac_confidence": 0.995,
        "ransac_min_inliers": 8,
        # Evaluation
        "eval_max_threshold": 25.0,
        "eval_step": 1.0,
        # Run
        "seed": 0,
        "workers": 1,
        "out": "keyreg-out",
        "gt_order": "fixed-first",
        "log_level": "INFO",
        "write_overlays": False,
        # Logit ingestion (16-bit PNG logits are value * scale + offset)
        "logit_scale": 1.0,
        "logit_offset": 0.0,
        # Training
        "train_preset": "desk",
    }
    DEFAULT_CONFIG.update({f"train_{f.name}": None for f in fields(TrainConfig)})

    def __init__(self, config_path: Optional[Path] = None):
        """Initialize the configuration manager.

        Args:
            config_path: Optional JSON configuration file
        """
        self.config_file_path = Path(config_path) if config_path is not None else None
        self.config: Dict[str, Any] = {}
        self.load_config()

    def load_config(self) -> Dict[str, Any]:
        """Load configuration from file or use defaults.

        Returns:
            Dictionary containing configuration

        Raises:
            ConfigError: unreadable file, invalid JSON or unknown keys
        """
        self.config = self.DEFAULT_CONFIG.copy()
        if self.config_file_path is None:
            return self.config
        try:
            with open(self.config_file_path, 'r') as f:
                loaded_config = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"Config file {self.config_file_path} not found") from e
        except (json.JSONDecodeError, IOError) as e:
            raise ConfigError(f"Error loading config {self.config_file_path}: {e}") from e
        if not isinstance(loaded_config, dict):
            raise ConfigError("Config file must hold a flat JSON object")
        self.update(loaded_config)
        return self.config

    def save_config(self, path: Optional[Path] = None) -> bool:
        """Save current configuration to file.

        Args:
            path: Target file; the loaded file by default

        Returns:
            True if successful, False otherwise
        """
        target = Path(path) if path is not None else self.config_file_path
        if target is None:
            return False
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            with open(target, 'w') as f:
                json.dump(self.config, f, indent=4, sort_keys=True)
            return True
        except IOError:
            return False

    def _check_key(self, key: str) -> None:
        if key not in self.DEFAULT_CONFIG:
            raise ConfigError(f"Unknown config key '{key}'")

    def get(self, key: str, default: Any = None) -> Any:
        """Get a configuration value.

        Args:
            key: Configuration key
            default: Default value if key doesn't exist

        Returns:
            Configuration value
        """
        return self.config.get(key, default)

    def set(self, key: str, value: Any) -> None:
        """Set a configuration value.

        Args:
            key: Configuration key
            value: Value to set
        """
        self._check_key(key)
        self.config[key] = value

    def update(self, updates: Dict[str, Any]) -> None:
        """Update multiple configuration values.

        Args:
            updates: Dictionary of key-value pairs to update
        """
        for key in updates:
            self._check_key(key)
        self.config.update(updates)

    def apply_overrides(self, overrides: Dict[str, Any]) -> None:
        """Apply command-line values; None means "flag not given"."""
        self.update({k: v for k, v in overrides.items() if v is not None})

    def get_config_dict(self) -> Dict[str, Any]:
        """Get the entire configuration dictionary.

        Returns:
            Configuration dictionary
        """
        return self.config.copy()

    def config_hash(self) -> str:
        """Stable digest of the configuration for report provenance."""
        return stable_hash(self.config)

    def budget(self) -> Optional[int]:
        """Keypoint budget as an int, None for unlimited."""
        return parse_budget(self.config.get("budget"))

    def train_config(self) -> TrainConfig:
        """TrainConfig from the named preset with non-null ``train_*`` keys applied.

        The run-wide ``seed`` is used unless ``train_seed`` is set.
        """
        overrides = {
            f.name: self.config[f"train_{f.name}"]
            for f in fields(TrainConfig)
            if self.config.get(f"train_{f.name}") is not None
        }
        overrides.setdefault("seed", int(self.config["seed"]))
        return TrainConfig.preset(self.config.get("train_preset", "desk"), **overrides)

    def ransac_config(self) -> RansacConfig:
        return RansacConfig(
            inlier_threshold=float(self.config["ransac_threshold"]),
            max_iterations=int(self.config["ransac_max_iterations"]),
            confidence=float(self.config["ransac_confidence"]),
            min_inliers=int(self.config["ransac_min_inliers"]),
            seed=int(self.config["seed"]),
        )

    def register_config(self) -> RegisterConfig:
        return RegisterConfig(
            working_size=int(self.config["working_size"]),
            ransac=self.ransac_config(),
            roi_margin=int(self.config["roi_margin"]),
        )
