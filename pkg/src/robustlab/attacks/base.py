"""Attack configuration, per-example results and norm-ball geometry."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

NORMS = ("linf", "l2", "latent-linf", "latent-l2", "transform-linf")


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 0.3
    iterations: int = 40
    learning_rate: float = 0.005
    restarts: int = 5
    early_stop: bool = True
    latent_box: tuple | None = None  # (low, high) scalars or arrays
    cw_kappa: float = 1.5
    cw_lambda: float = 1.0
    cw_iterations: int = 120
    seed: int | tuple = 0

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}; expected one of {NORMS}")
        # a zero radius is allowed: it turns every attack into the identity
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")

    @property
    def ball(self) -> str:
        """The norm of the constraint ball: ``linf`` or ``l2``."""
        return "l2" if self.norm.endswith("l2") else "linf"

    def with_(self, **changes) -> "AttackConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class AttackResult:
    success: bool
    adversarial: np.ndarray
    perturbation: np.ndarray
    iterations_used: int
    restart_index: int
    final_loss: float
    norm_of_perturbation: float
    label: int = -1
    predicted_before: int = -1
    predicted_after: int = -1
    index: int = -1


CSV_COLUMNS = (
    "index",
    "label",
    "predicted_before",
    "predicted_after",
    "success",
    "norm_used",
    "perturbation_norm",
    "iterations_used",
    "restart_index",
    "final_loss",
)


@dataclass
class AttackBatch:
    """Results for a batch of attacked inputs, stored column-wise."""

    norm: str
    success: np.ndarray
    adversarial: np.ndarray
    perturbation: np.ndarray
    iterations_used: np.ndarray
    restart_index: np.ndarray
    final_loss: np.ndarray
    perturbation_norm: np.ndarray
    labels: np.ndarray
    predicted_before: np.ndarray
    predicted_after: np.ndarray
    indices: np.ndarray
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.success)

    def __getitem__(self, i: int) -> AttackResult:
        return AttackResult(
            success=bool(self.success[i]),
            adversarial=self.adversarial[i],
            perturbation=self.perturbation[i],
            iterations_used=int(self.iterations_used[i]),
            restart_index=int(self.restart_index[i]),
            final_loss=float(self.final_loss[i]),
            norm_of_perturbation=float(self.perturbation_norm[i]),
            label=int(self.labels[i]),
            predicted_before=int(self.predicted_before[i]),
            predicted_after=int(self.predicted_after[i]),
            index=int(self.indices[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def image_perturbation(self) -> np.ndarray:
        """Image-space difference between adversarial and clean inputs."""
        return self.extra.get("image_delta", self.perturbation)

    def select(self, rows) -> "AttackBatch":
        rows = np.asarray(rows)
        kwargs = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "norm":
                kwargs[f.name] = value
            elif f.name == "extra":
                kwargs[f.name] = {k: v[rows] for k, v in value.items()}
            else:
                kwargs[f.name] = value[rows]
        return AttackBatch(**kwargs)

    @staticmethod
    def merge(parts: list["AttackBatch"], order: np.ndarray | None = None) -> "AttackBatch":
        """Concatenate batches; ``order`` re-sorts rows (e.g. undo a partition)."""
        first = parts[0]
        kwargs = {}
        for f in fields(first):
            if f.name == "norm":
                kwargs[f.name] = first.norm
            elif f.name == "extra":
                kwargs[f.name] = {k: np.concatenate([p.extra[k] for p in parts]) for k in first.extra}
            else:
                kwargs[f.name] = np.concatenate([getattr(p, f.name) for p in parts])
        merged = AttackBatch(**kwargs)
        if order is not None:
            merged = merged.select(np.argsort(order, kind="stable"))
        return merged

    def rows(self):
        for i in range(len(self)):
            yield {
                "index": int(self.indices[i]),
                "label": int(self.labels[i]),
                "predicted_before": int(self.predicted_before[i]),
                "predicted_after": int(self.predicted_after[i]),
                "success": int(bool(self.success[i])),
                "norm_used": self.norm,
                "perturbation_norm": repr(float(self.perturbation_norm[i])),
                "iterations_used": int(self.iterations_used[i]),
                "restart_index": int(self.restart_index[i]),
                "final_loss": repr(float(self.final_loss[i])),
            }

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(self.rows())


def batch_norms(delta: np.ndarray, norm: str) -> np.ndarray:
    flat = delta.reshape(len(delta), -1)
    if norm in ("linf", "latent-linf", "transform-linf"):
        return np.abs(flat).max(axis=1) if flat.shape[1] else np.zeros(len(flat))
    return np.sqrt((flat * flat).sum(axis=1))


def project_ball(delta: np.ndarray, norm: str, epsilon) -> np.ndarray:
    """Project each row of a batch (first axis) onto the norm ball of radius epsilon.

    L-inf clamps every coordinate to [-eps, eps]; L2 rescales by
    ``min(1, eps / ||delta||_2)``. Both are idempotent.
    """
    delta = np.asarray(delta, dtype=np.float64)
    eps = np.asarray(epsilon, dtype=np.float64)
    if np.any(eps < 0):
        raise ValueError("epsilon must be non-negative")
    ball = "l2" if norm.endswith("l2") else "linf"
    if ball == "linf":
        bound = eps.reshape(eps.shape + (1,) * (delta.ndim - eps.ndim)) if eps.ndim else eps
        return np.clip(delta, -bound, bound)
    flat = delta.reshape(len(delta), -1)
    lengths = np.sqrt((flat * flat).sum(axis=1))
    # rescaled rows can sit a few ulps above eps; treat them as inside so the map is idempotent
    outside = lengths > eps * (1.0 + 1e-12)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(outside, eps / np.where(lengths > 0, lengths, 1.0), 1.0)
    return delta * factor.reshape((-1,) + (1,) * (delta.ndim - 1))


def init_perturbation(rng: np.random.Generator, norm: str, epsilon: float, shape, u: float | None = None) -> np.ndarray:
    """Random start inside the ball, uniform over distance and direction.

    L2: ``u * eps * d / ||d||_2`` with ``d ~ N(0, I)``. L-inf: ``u * eps * d``
    with ``d`` uniform on [-1, 1] per coordinate. ``u ~ U(0, 1)`` unless given.
    """
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    if u is None:
        u = rng.uniform()
    if norm.endswith("l2"):
        d = rng.standard_normal(shape)
        length = np.sqrt((d * d).sum())
        return u * epsilon * d / length if length > 0 else np.zeros(shape)
    d = rng.uniform(-1.0, 1.0, size=shape)
    return u * epsilon * d


def stream(seed, index: int, restart: int) -> np.random.Generator:
    """Random stream for one (input, restart) pair under a master seed."""
    key = list(seed) if isinstance(seed, (tuple, list)) else [seed]
    return np.random.default_rng([*(int(k) for k in key), int(index), int(restart)])


def success_rate(success, eligible) -> float | None:
    """Fraction of eligible (correctly classified) inputs that were fooled.

    Returns ``None`` when nothing is eligible.
    """
    success = np.asarray(success, dtype=bool)
    eligible = np.asarray(eligible, dtype=bool)
    n = int(eligible.sum())
    if n == 0:
        return None
    return float((success & eligible).sum() / n)
