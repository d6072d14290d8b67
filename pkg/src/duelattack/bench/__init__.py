"""Configuration, checkpoints, experiment orchestration and the command-line interface."""

from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, RunConfig, dump_config, load_config
from .validate import ValidationReport, perturb_validate

__all__ = ["Checkpoint", "CheckpointError", "ConfigError", "RunConfig", "ValidationReport", "dump_config",
           "load_config", "perturb_validate"]
