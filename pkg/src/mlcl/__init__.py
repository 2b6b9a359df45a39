"""Continual learning for multi-label classification on task streams."""

from .buffer import ReplayBuffer, capacity_for
from .errors import ConfigError, ManifestError, NumericError, StateError, ValidationError
from .harness import ExperimentConfig, SummaryTable, rng_for, run_experiment
from .metrics import EvalResult, RunRecord, evaluate_model, forgetting_pct, macro_f1
from .strategies import STRATEGY_KINDS, StrategyConfig, init_strategy_state, train_joint, train_task
from .stream import StreamSpec, TaskDataset, build_default_stream, generate_task_data

__all__ = [
    "ConfigError",
    "EvalResult",
    "ExperimentConfig",
    "ManifestError",
    "NumericError",
    "ReplayBuffer",
    "RunRecord",
    "STRATEGY_KINDS",
    "StateError",
    "StrategyConfig",
    "StreamSpec",
    "SummaryTable",
    "TaskDataset",
    "ValidationError",
    "build_default_stream",
    "capacity_for",
    "evaluate_model",
    "forgetting_pct",
    "generate_task_data",
    "init_strategy_state",
    "macro_f1",
    "rng_for",
    "run_experiment",
    "train_joint",
    "train_task",
]
