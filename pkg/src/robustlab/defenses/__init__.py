from .profile import ATTACK_KINDS, AttackSpec, default_suite, robustness_profile, run_attack
from .training import (
    KINDS,
    METRIC_COLUMNS,
    TrainingMode,
    TrainingRun,
    TrainingSchedule,
    evaluate,
    train,
    write_metrics,
)

__all__ = [
    "ATTACK_KINDS",
    "KINDS",
    "METRIC_COLUMNS",
    "AttackSpec",
    "TrainingMode",
    "TrainingRun",
    "TrainingSchedule",
    "default_suite",
    "evaluate",
    "robustness_profile",
    "run_attack",
    "train",
    "write_metrics",
]
