"""Experiment configuration, runners and the command line."""

from .config import ConfigError, ExperimentConfig, Toggles
from .experiments import (ABLATION_ROWS, AblationReport, TrainResult, build_pools, run_ablation,
                          run_distill, run_train)

__all__ = ["ConfigError", "ExperimentConfig", "Toggles", "ABLATION_ROWS", "AblationReport",
           "TrainResult", "build_pools", "run_ablation", "run_distill", "run_train"]
