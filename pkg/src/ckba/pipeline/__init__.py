"""End-to-end synthetic-twin experiment driven by a JSON configuration."""

from .config import ConfigError, config_hash, load, resolve
from .stages import STAGES, StageError, run_stage

__all__ = ["ConfigError", "config_hash", "load", "resolve", "STAGES", "StageError", "run_stage"]
