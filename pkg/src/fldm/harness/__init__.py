"""Experiment harness: config loading, the edit pipeline and sweep commands."""

from .config import ConfigError, ExperimentConfig, config_from_dict, load_config, standard_config
from .runner import (
    COMMANDS,
    HarnessError,
    build_context,
    cmd_ablate_schedule,
    cmd_baselines,
    cmd_edit,
    cmd_sweep_alpha,
    cmd_sweep_tau,
    cmd_train,
)

__all__ = [
    "COMMANDS",
    "ConfigError",
    "ExperimentConfig",
    "HarnessError",
    "build_context",
    "cmd_ablate_schedule",
    "cmd_baselines",
    "cmd_edit",
    "cmd_sweep_alpha",
    "cmd_sweep_tau",
    "cmd_train",
    "config_from_dict",
    "load_config",
    "standard_config",
]
