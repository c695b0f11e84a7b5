"""
Settings configuration
"""

import copy
import logging
import os
from typing import Any, Dict, Optional

import yaml
from dotenv import load_dotenv
from pydantic import ValidationError

from src.backends import TIMEOUT_ENV_VAR, default_timeout, resolve_timeout
from src.boost import BoostConfig
from src.errors import ConfigError
from src.losses import LossWeights
from src.metrics import EvalConfig

logger = logging.getLogger(__name__)


class Settings:
    """Toolkit settings: defaults, optionally overridden by a YAML file and the environment"""

    DEFAULT_SETTINGS = {
        "boost": {
            "patch": 640,
            "overlap": 320,
            "reference_size": 518,
            "passthrough_max_side": 960,
            "degenerate_variance_eps": 1e-8,
            "align_patches": True,
        },
        "eval": {
            "delta_threshold": 1.25,
            "depth_cap": None,
            "align": "least_squares",
            "whdr_margin": 0.0,
        },
        "losses": {
            "alpha_l": 0.4,
            "alpha_edge": 0.2,
            "alpha_lpips": 0.4,
        },
        "backend": {
            "timeout_secs": 120.0,
            "io_dir": None,
        },
        "runtime": {
            "jobs": None,
        },
        "logging": {
            "level": "INFO",
            "format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        },
    }

    def __init__(self, config_file: Optional[str] = None):
        """
        Initialize settings

        Args:
            config_file: Path to YAML configuration file
        """
        self.settings = copy.deepcopy(self.DEFAULT_SETTINGS)

        if config_file and os.path.exists(config_file):
            self._load_from_file(config_file)
        self._load_from_env()

    def _load_from_file(self, file_path: str) -> None:
        """Load settings from YAML file"""
        try:
            with open(file_path, "r", encoding="utf-8") as f:
                custom_settings = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            logger.warning("Could not load config file %s: %s", file_path, e)
            return
        if not isinstance(custom_settings, dict):
            logger.warning("Ignoring config file %s: top level is not a mapping", file_path)
            return
        self._merge_settings(custom_settings)

    def _load_from_env(self) -> None:
        load_dotenv()
        if os.getenv(TIMEOUT_ENV_VAR):
            self.settings["backend"]["timeout_secs"] = default_timeout()

    def _merge_settings(self, custom: Dict[str, Any]) -> None:
        """Merge custom settings with defaults"""
        for key, value in custom.items():
            if isinstance(value, dict) and isinstance(self.settings.get(key), dict):
                self.settings[key].update(value)
            else:
                self.settings[key] = value

    def get(self, key: str, default: Any = None) -> Any:
        """Get a setting value by dotted key, e.g. "boost.patch" """
        keys = key.split(".")
        value = self.settings

        for k in keys:
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default

        return value

    def _build(self, model, section: str):
        try:
            return model(**(self.get(section) or {}))
        except ValidationError as e:
            raise ConfigError(f"invalid '{section}' settings: {e}") from None

    def boost_config(self) -> BoostConfig:
        """BoostConfig from the "boost" section; invalid values raise ConfigError"""
        return self._build(BoostConfig, "boost")

    def eval_config(self) -> EvalConfig:
        return self._build(EvalConfig, "eval")

    def loss_weights(self) -> LossWeights:
        return self._build(LossWeights, "losses")

    def backend_timeout(self) -> float:
        """
        Validated backend.timeout_secs

        Returns:
            Timeout in seconds, always positive.

        Raises:
            ConfigError: If the configured value is not a positive number.
        """
        return resolve_timeout(self.get("backend.timeout_secs"))

    def to_dict(self) -> Dict[str, Any]:
        """Get all settings as dictionary"""
        return copy.deepcopy(self.settings)
