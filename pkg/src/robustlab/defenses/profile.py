"""Robustness profiles: success rates of an attack suite against one model."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..attacks import (
    AttackConfig,
    attack_success_rate,
    cw_attack,
    on_manifold_attack,
    pgd_attack,
    random_perturbation_baseline,
    transformation_attack,
)
from ..manifold import TrueManifold

ATTACK_KINDS = ("pgd", "cw", "on_manifold", "transform", "random_image", "random_latent", "random_transform")


@dataclass(frozen=True)
class AttackSpec:
    name: str
    kind: str
    config: AttackConfig
    samples: int = 200

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; choose one of {ATTACK_KINDS}")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")


def default_suite(regular_samples: int = 200, manifold_samples: int = 500) -> list[AttackSpec]:
    return [
        AttackSpec("pgd_linf", "pgd", AttackConfig(norm="linf", epsilon=0.3), regular_samples),
        AttackSpec("pgd_l2", "pgd", AttackConfig(norm="l2", epsilon=1.5), regular_samples),
        AttackSpec("on_manifold", "on_manifold", AttackConfig(norm="latent-linf", epsilon=0.3), manifold_samples),
    ]


def run_attack(spec: AttackSpec, model, images, labels, indices, manifold=None, dataset=None):
    kind = spec.kind
    cfg = spec.config
    if kind == "pgd":
        return pgd_attack(model, images, labels, cfg, indices)
    if kind == "cw":
        return cw_attack(model, images, labels, cfg, indices)
    if kind == "transform":
        return transformation_attack(model, images, labels, cfg, indices)
    if kind == "random_image":
        return random_perturbation_baseline(model, images, labels, "image", cfg, indices=indices)
    if kind == "random_transform":
        return random_perturbation_baseline(model, images, labels, "transform", cfg, indices=indices)
    man, z = manifold, None
    if manifold is None or manifold == "true":
        if dataset is None or not hasattr(dataset, "poses"):
            raise ValueError(f"attack {spec.name!r} needs stored poses or a learned manifold")
        man = TrueManifold.for_dataset(dataset, indices)
        z = man.poses
    if kind == "on_manifold":
        return on_manifold_attack(model, man, images, labels, cfg, z=z, indices=indices)
    return random_perturbation_baseline(model, images, labels, "latent", cfg, manifold=man, z=z, indices=indices)


def robustness_profile(model, test_set, suite: list[AttackSpec] | None = None, manifold=None, out_dir=None) -> dict:
    """Attack the first ``samples`` test inputs with every attack of the suite.

    Returns, per attack name, the success rate over correctly classified
    inputs (None if there are none), the mean perturbation norm over
    successes and the counts. Per-example CSVs go to ``out_dir`` when given.
    """
    suite = default_suite() if suite is None else suite
    metrics = {}
    for spec in suite:
        n = min(spec.samples, len(test_set))
        index = np.arange(n)
        batch = run_attack(spec, model, test_set.images[:n], test_set.labels[:n], index, manifold, test_set)
        eligible = batch.predicted_before == batch.labels
        hits = batch.success & eligible
        metrics[spec.name] = {
            "success_rate": attack_success_rate(batch, eligible),
            "mean_norm_success": float(batch.perturbation_norm[hits].mean()) if hits.any() else None,
            "eligible": int(eligible.sum()),
            "attacked": n,
        }
        if out_dir is not None:
            batch.to_csv(Path(out_dir) / f"attack_{spec.name}.csv")
        metrics[spec.name]["batch"] = batch
    return metrics
