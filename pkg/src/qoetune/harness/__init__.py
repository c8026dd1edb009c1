"""Experiment harness: configuration, runs, logs, persistence and reports."""

from .config import ConfigError, ExperimentConfig
from .experiment import CellError, Experiment, default_sweep, enumerate_cells, run_experiment
from .reports import ReportError, correlation_report, heatmap_report, summarize
from .state import PersistedUserState, StallEvent, StateError, persist_state, restore_state

__all__ = ["ConfigError", "ExperimentConfig", "CellError", "Experiment", "default_sweep", "enumerate_cells",
           "run_experiment", "ReportError", "correlation_report", "heatmap_report", "summarize",
           "PersistedUserState", "StallEvent", "StateError", "persist_state", "restore_state"]
