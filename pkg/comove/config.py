# -*- coding: utf-8 -*-
"""
Configuration loading for experiment and synthetic-data runs.
Configs are JSON files; YAML is accepted too since it is a superset.
"""

import os
import logging
from typing import Any, Dict, Optional

import yaml

from comove.errors import ConfigError

logger = logging.getLogger(__name__)

# ============================================================================
# CONSTANTS
# ============================================================================

DEFAULT_SCHEMA = "long"
DEFAULT_VARIANT = "MOSM"
DEFAULT_Q = 3
DEFAULT_TRIALS = 5
DEFAULT_SEED = 0
DEFAULT_MAX_ITERATIONS = 5000
DEFAULT_GRID_SIZE = 1000
DEFAULT_GRADIENT_CHECK = True
DEFAULT_LOGNORMAL_STD = 0.25
DEFAULT_ADDITIVE_STD = 0.1
DEFAULT_OUTPUT_DIR = "outputs"
DEFAULT_GRID_POINTS = 200
DEFAULT_REPORT_SCALE = "transformed"
DEFAULT_EXPERIMENT = "experiment"
DEFAULT_METRICS_EXPORT_TO_JSON = False
DEFAULT_METRICS_JSON_PATH = "run-timings.json"

VALID_SCALES = ("transformed", "original")
VALID_SCHEMAS = ("long", "wide")

MSG_INFO_LOADED_CONFIG = "Loaded configuration from {path}"
MSG_ERROR_CONFIG_NOT_FOUND = "Config file {path} not found"
MSG_ERROR_CONFIG_PARSE = "Error loading config file {path}: {error}"
MSG_ERROR_CONFIG_NOT_MAPPING = "Config file {path} must contain a mapping at top level"

# ============================================================================
# CONFIGURATION LOADING
# ============================================================================

def load_config(path: str) -> Dict:
    """Load a JSON/YAML configuration file into a dictionary."""
    if not os.path.exists(path):
        raise ConfigError(MSG_ERROR_CONFIG_NOT_FOUND.format(path=path))
    try:
        with open(path, 'r', encoding='utf-8') as f:
            config = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(MSG_ERROR_CONFIG_PARSE.format(path=path, error=e)) from e
    if not isinstance(config, dict):
        raise ConfigError(MSG_ERROR_CONFIG_NOT_MAPPING.format(path=path))
    logger.info(MSG_INFO_LOADED_CONFIG.format(path=path))
    return config

def get_config_value(config: Dict, path: str, default: Any):
    """Safely get nested config value using dot notation (e.g., 'training.trials')."""
    keys = path.split('.')
    value = config
    for key in keys:
        if isinstance(value, dict):
            value = value.get(key)
            if value is None:
                return default
        else:
            return default
    return value if value is not None else default

def set_config_value(config: Dict, path: str, value: Any) -> None:
    """Set nested config value using dot notation, creating intermediate mappings."""
    keys = path.split('.')
    node = config
    for key in keys[:-1]:
        child = node.get(key)
        if not isinstance(child, dict):
            child = {}
            node[key] = child
        node = child
    node[keys[-1]] = value

def per_channel_value(setting: Any, channel: str, default: Any = None) -> Any:
    """
    Resolve a per-channel setting. A mapping is looked up by channel name,
    falling back to its "*" entry; any other value applies to every channel.
    """
    if isinstance(setting, dict):
        if channel in setting:
            return setting[channel]
        return setting.get("*", default)
    return default if setting is None else setting


def require(config: Dict, path: str) -> Any:
    """Get a mandatory config value or raise ConfigError naming the key."""
    value = get_config_value(config, path, None)
    if value is None:
        raise ConfigError(f"Missing required config value '{path}'")
    return value

def resolve_path(path: Optional[str], base_dir: Optional[str]) -> Optional[str]:
    """Resolve a config-relative path against the config file's directory."""
    if path is None or os.path.isabs(path) or base_dir is None:
        return path
    candidate = os.path.join(base_dir, path)
    return candidate if os.path.exists(candidate) else path
