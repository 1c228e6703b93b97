"""
iprompt-lab

A desk-scale continual-learning lab for prompt-based class-incremental
learning on a frozen Vision Transformer, featuring:
- Reverse-mode autodiff and Adam on numpy (no deep-learning framework)
- Semantic prompt matching with importance-weighted logit aggregation
- Query-key and attention prompt baselines plus full fine-tuning
- Imbalanced task schedules, Avg/Last/AUC accuracy and parameter ratios
- Configurable via environment variables, config files or explicit settings
"""

__version__ = "0.1.0"

from iprompt_lab.config import ExperimentConfig, get_settings, load_config
from iprompt_lab.data import Dataset, SyntheticSpec, build_datasets, generate
from iprompt_lab.encoder import EncoderParams, EncoderTrace, forward
from iprompt_lab.exceptions import (
    ConfigError,
    DimensionError,
    FormatError,
    InvalidMaskError,
    IPromptLabError,
    NumericError,
    ProtocolError,
    ScheduleError,
    StateError,
    TrainingError,
    UsageError,
    VerificationError,
)
from iprompt_lab.harness import evaluate, pretrain_backbone, run_experiment, train_task
from iprompt_lab.learners import (
    AttentionLearner,
    FinetuneLearner,
    IPromptLearner,
    Learner,
    QueryKeyLearner,
    build_learner,
)
from iprompt_lab.models import ClassId, ForwardPassCounter, RunReport, TaskId, TaskRecord
from iprompt_lab.prompts import PromptPool, compose_prompt, semantic_match
from iprompt_lab.schedule import TaskSchedule, build_schedule

__all__ = [
    "__version__",
    "ConfigError",
    "DimensionError",
    "FormatError",
    "InvalidMaskError",
    "IPromptLabError",
    "NumericError",
    "ProtocolError",
    "ScheduleError",
    "StateError",
    "TrainingError",
    "UsageError",
    "VerificationError",
    "ExperimentConfig",
    "get_settings",
    "load_config",
    "Dataset",
    "SyntheticSpec",
    "build_datasets",
    "generate",
    "EncoderParams",
    "EncoderTrace",
    "forward",
    "PromptPool",
    "compose_prompt",
    "semantic_match",
    "Learner",
    "IPromptLearner",
    "QueryKeyLearner",
    "AttentionLearner",
    "FinetuneLearner",
    "build_learner",
    "TaskSchedule",
    "build_schedule",
    "ClassId",
    "TaskId",
    "ForwardPassCounter",
    "RunReport",
    "TaskRecord",
    "evaluate",
    "pretrain_backbone",
    "run_experiment",
    "train_task",
]
