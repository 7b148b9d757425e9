"""Normal, adversarial and augmentation training loops."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..attacks import (
    AttackConfig,
    on_manifold_attack,
    pgd_attack,
    random_perturbation_baseline,
    transformation_attack,
)
from ..autodiff import AdamState, Tensor, adam_step, cross_entropy
from ..manifold import TrueManifold

KINDS = (
    "normal",
    "adv_half",
    "adv_full",
    "adv_weak",
    "on_manifold",
    "adv_transform",
    "random_image",
    "random_latent",
    "random_transform",
    "mixed",
)

# inner attack defaults per kind: (norm, radius)
DEFAULT_BUDGETS = {
    "adv_half": ("linf", 0.3),
    "adv_full": ("linf", 0.3),
    "adv_weak": ("linf", 0.3),
    "on_manifold": ("latent-linf", 0.3),
    "adv_transform": ("transform-linf", 0.3),
    "random_image": ("linf", 0.3),
    "random_latent": ("latent-linf", 0.3),
    "random_transform": ("transform-linf", 0.3),
}

NEEDS_MANIFOLD = ("on_manifold", "random_latent")


@dataclass(frozen=True)
class TrainingMode:
    """How each training batch is built.

    ``fraction`` is the share of every batch replaced by perturbed inputs
    (0.5 by default, 1.0 for ``adv_full``). ``mixed`` combines image-space and
    on-manifold adversarial training; ``mix_ratio`` is the share of perturbed
    inputs produced by the on-manifold attack.
    """

    kind: str = "normal"
    attack: AttackConfig | None = None
    fraction: float | None = None
    manifold_attack: AttackConfig | None = None
    mix_ratio: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown training mode {self.kind!r}; choose one of {KINDS}")
        if self.fraction is not None and not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must lie in [0, 1]")

    @property
    def perturbed_fraction(self) -> float:
        if self.kind == "normal":
            return 0.0
        if self.fraction is not None:
            return self.fraction
        return 1.0 if self.kind == "adv_full" else 0.5

    @property
    def needs_manifold(self) -> bool:
        return self.kind in NEEDS_MANIFOLD or self.kind == "mixed"

    def inner_attack(self) -> AttackConfig:
        """Attack configuration used inside training: one restart, no early stop (except adv_weak)."""
        if self.kind == "normal":
            raise ValueError("normal training has no inner attack")
        key = "adv_half" if self.kind == "mixed" else self.kind
        norm, eps = DEFAULT_BUDGETS[key]
        base = self.attack or AttackConfig(norm=norm, epsilon=eps)
        return base.with_(restarts=1, early_stop=self.kind == "adv_weak")

    def inner_manifold_attack(self) -> AttackConfig:
        base = self.manifold_attack or AttackConfig(norm="latent-linf", epsilon=0.3)
        return base.with_(restarts=1, early_stop=False)


@dataclass(frozen=True)
class TrainingSchedule:
    epochs: int = 20
    batch_size: int = 100
    learning_rate: float = 0.01
    decay: float = 0.95
    weight_decay: float = 1e-4
    seed: int = 0
    n_train: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class TrainingRun:
    model: object
    metrics: list = field(default_factory=list)
    perturbed_per_batch: list = field(default_factory=list)

    def metrics_csv(self, path) -> None:
        write_metrics(self.metrics, path)


METRIC_COLUMNS = ("epoch", "train_loss", "train_error", "test_error", "lr")


def write_metrics(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row[k] is None else repr(row[k]) if isinstance(row[k], float) else row[k]) for k in METRIC_COLUMNS})


def evaluate(model, images: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of misclassified examples (eval mode)."""
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(model.predict(np.asarray(images)) != np.asarray(labels)))


def _perturb(model, mode: TrainingMode, x, y, idx, dataset, manifold, seed):
    """Replace ``x`` (the perturbed share of a batch) according to the mode."""
    kind = mode.kind
    if kind in ("adv_half", "adv_full", "adv_weak"):
        return pgd_attack(model, x, y, mode.inner_attack().with_(seed=seed), indices=idx).adversarial
    if kind == "adv_transform":
        return transformation_attack(model, x, y, mode.inner_attack().with_(seed=seed), indices=idx).adversarial
    if kind == "random_image":
        return random_perturbation_baseline(model, x, y, "image", mode.inner_attack().with_(seed=seed), indices=idx).adversarial
    if kind == "random_transform":
        return random_perturbation_baseline(model, x, y, "transform", mode.inner_attack().with_(seed=seed), indices=idx).adversarial
    man, z = _manifold_for(manifold, dataset, idx)
    if kind == "on_manifold":
        return on_manifold_attack(model, man, x, y, mode.inner_attack().with_(seed=seed), z=z, indices=idx).adversarial
    if kind == "random_latent":
        return random_perturbation_baseline(model, x, y, "latent", mode.inner_attack().with_(seed=seed), manifold=man, z=z, indices=idx).adversarial
    if kind == "mixed":
        n_man = int(round(mode.mix_ratio * len(x)))
        out = np.empty_like(x)
        if n_man:
            sub_z = None if z is None else z[:n_man]
            sub_man = man.subset(np.arange(n_man)) if isinstance(man, TrueManifold) else man
            out[:n_man] = on_manifold_attack(
                model, sub_man, x[:n_man], y[:n_man], mode.inner_manifold_attack().with_(seed=seed), z=sub_z, indices=idx[:n_man]
            ).adversarial
        if n_man < len(x):
            out[n_man:] = pgd_attack(model, x[n_man:], y[n_man:], mode.inner_attack().with_(seed=seed), indices=idx[n_man:]).adversarial
        return out
    raise ValueError(f"mode {kind!r} does not perturb inputs")


def _manifold_for(manifold, dataset, idx):
    """Latent decoder and codes for a set of training indices."""
    if manifold is None or manifold == "true":
        if not hasattr(dataset, "poses"):
            raise ValueError("the true manifold needs a dataset with stored poses")
        man = TrueManifold.for_dataset(dataset, idx)
        return man, man.poses
    return manifold, None


def train(
    model,
    dataset,
    mode: TrainingMode | None = None,
    schedule: TrainingSchedule | None = None,
    manifold=None,
    test_set=None,
    on_epoch=None,
) -> TrainingRun:
    """Train ``model`` in place with Adam on cross-entropy.

    Each epoch shuffles the (first ``n_train``) training examples; every batch
    keeps its first part clean and replaces its last
    ``ceil(fraction * B)`` inputs with perturbed versions built against the
    current model (in eval mode). ``manifold`` is ``"true"`` (stored poses;
    the default for latent modes) or a learned manifold.
    """
    mode = mode or TrainingMode()
    schedule = schedule or TrainingSchedule()
    n_total = len(dataset)
    n = schedule.n_train if schedule.n_train is not None else n_total
    if n > n_total:
        raise ValueError(f"N={n} exceeds the {n_total} available training examples")
    if n < 1:
        raise ValueError("need at least one training example")
    if mode.needs_manifold and manifold not in (None, "true") and not hasattr(manifold, "decode") and not hasattr(manifold, "models"):
        raise ValueError(f"mode {mode.kind!r} needs a manifold with a decoder")
    if mode.needs_manifold and manifold in (None, "true") and not hasattr(dataset, "poses"):
        raise ValueError(f"mode {mode.kind!r} needs stored poses or a learned manifold")

    images = dataset.images[:n]
    labels = dataset.labels[:n]
    state = AdamState(schedule.learning_rate, schedule.decay, schedule.weight_decay)
    rng = np.random.default_rng([schedule.seed, 7])
    fraction = mode.perturbed_fraction
    run = TrainingRun(model)
    for epoch in range(schedule.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        seen = 0
        lr = state.learning_rate
        for b, start in enumerate(range(0, n, schedule.batch_size)):
            idx = order[start : start + schedule.batch_size]
            if len(idx) < 2:  # batch statistics need two examples
                continue
            x = images[idx]
            y = labels[idx]
            k = math.ceil(fraction * len(idx))
            if k:
                x = x.copy()
                seed = (schedule.seed, epoch, b)
                x[len(idx) - k :] = _perturb(model, mode, x[len(idx) - k :], y[len(idx) - k :], idx[len(idx) - k :], dataset, manifold, seed)
            run.perturbed_per_batch.append(k)
            model.train()
            model.zero_grad()
            logits = model(Tensor(x))
            loss = cross_entropy(logits, y)
            loss.backward()
            adam_step(state, model.named_parameters())
            total_loss += float(loss.data) * len(idx)
            seen += len(idx)
        state.end_epoch()
        row = {
            "epoch": epoch + 1,
            "train_loss": total_loss / seen,
            "train_error": evaluate(model, images, labels),
            "test_error": evaluate(model, test_set.images, test_set.labels) if test_set is not None else None,
            "lr": lr,
        }
        run.metrics.append(row)
        if on_epoch is not None:
            on_epoch(row)
    model.eval()
    return run
