"""Configuration, run management, reports and the command line."""

from .config import (PROFILE_NAMES, PROFILES, ConfigError, ExperimentConfig, default_config, load_config,
                     parse_config, serialize_config)
from .report import emit_report
from .runner import (RunOutcome, RunSpec, eval_plan, execute_all, execute_run, finetune_plan,
                     output_root, run_dir, sweep_plan, train_plan)

__all__ = [
    "ConfigError", "ExperimentConfig", "PROFILES", "PROFILE_NAMES", "RunOutcome", "RunSpec",
    "default_config", "emit_report", "eval_plan", "execute_all", "execute_run", "finetune_plan",
    "load_config", "output_root", "parse_config", "run_dir", "serialize_config", "sweep_plan", "train_plan",
]
