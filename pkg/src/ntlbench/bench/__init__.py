"""Config-driven experiment runner, run registry, reports and CLI."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config, parse_config, sweep_variants
from .registry import REGISTRY_ENV, Registry, RunRecord, UnknownRunError
from .report import cli_report, format_delta, report_table
from .runner import cli_attack, cli_train, prepare, sweep

__all__ = ["CheckpointError", "ConfigError", "ExperimentConfig", "REGISTRY_ENV", "Registry", "RunRecord",
           "UnknownRunError", "cli_attack", "cli_report", "cli_train", "format_delta", "load_checkpoint",
           "load_config", "parse_config", "prepare", "report_table", "save_checkpoint", "sweep",
           "sweep_variants"]
