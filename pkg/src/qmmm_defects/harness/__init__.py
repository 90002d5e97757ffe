"""Experiment orchestration and command line interface."""
from .config import ExperimentConfig
from .experiments import (build_problem, run_converge, run_decay, run_fit, run_ghostforce, run_reference)

__all__ = ["ExperimentConfig", "build_problem", "run_converge", "run_decay", "run_fit", "run_ghostforce",
           "run_reference"]
