from .base import (
    CSV_COLUMNS,
    AttackBatch,
    AttackConfig,
    AttackResult,
    batch_norms,
    init_perturbation,
    project_ball,
    success_rate,
)
from .methods import (
    attack_success_rate,
    cw_attack,
    cw_objective,
    on_manifold_attack,
    pgd_attack,
    random_perturbation_baseline,
    transfer_attack,
    transformation_attack,
    warp_by_offset,
)

__all__ = [
    "CSV_COLUMNS",
    "AttackBatch",
    "AttackConfig",
    "AttackResult",
    "attack_success_rate",
    "batch_norms",
    "cw_attack",
    "cw_objective",
    "init_perturbation",
    "on_manifold_attack",
    "pgd_attack",
    "project_ball",
    "random_perturbation_baseline",
    "success_rate",
    "transfer_attack",
    "transformation_attack",
    "warp_by_offset",
]
