"""Experiment configuration: YAML grammar, defaults and validation.

A config file is a YAML mapping. Every key is optional; missing keys take
the defaults below. ``robustlab validate`` prints the effective config with
all defaults expanded, and that output parses back to the same config.

.. code-block:: yaml

    name: smoke
    master_seed: 0
    output_dir: runs/smoke
    workers: 1
    dataset:
      kind: synthetic          # or "directory" together with prototypes_dir
      image_size: 28
      fonts: null              # number of built-in fonts per class (null: all)
      prototypes_dir: null
      train_per_class: 400
      test_per_class: 100
    sweep:
      n_train: [250]
      seeds: [0]               # or an integer count (seeds 0..count-1)
    architecture: conv_small   # conv_small | mlp
    training: {epochs: 20, batch_size: 100, learning_rate: 0.01, decay: 0.95, weight_decay: 0.0001}
    modes:
      - {kind: normal}
      - {kind: adv_half, norm: linf, epsilon: 0.3}
    attacks:
      - {name: pgd_linf, kind: pgd, norm: linf, epsilon: 0.3, samples: 100}
      - {name: on_manifold, kind: on_manifold, norm: latent-linf, epsilon: 0.3, samples: 100}
    manifold: {kind: true}
    projection: {modes: [normal], samples: 50, regular_attack: pgd_linf, manifold_attack: on_manifold, bins: 20, knn: 50}
    svg: true
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ..attacks.base import NORMS
from ..defenses.profile import ATTACK_KINDS
from ..defenses.training import DEFAULT_BUDGETS, KINDS, NEEDS_MANIFOLD

ENV_OUTPUT = "ROBUSTLAB_OUTPUT_DIR"
ENV_WORKERS = "ROBUSTLAB_WORKERS"


class ConfigError(ValueError):
    """Raised with a list of ``file:line: message`` diagnostics."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = diagnostics
        super().__init__("\n".join(diagnostics))


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    image_size: int = 28
    fonts: int | None = None
    prototypes_dir: str | None = None
    train_per_class: int = 400
    test_per_class: int = 100


@dataclass
class SweepSpec:
    n_train: list = field(default_factory=lambda: [250, 500, 1000, 2000, 4000])
    seeds: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class TrainingSpec:
    epochs: int = 20
    batch_size: int = 100
    learning_rate: float = 0.01
    decay: float = 0.95
    weight_decay: float = 0.0001


@dataclass
class ModeSpec:
    kind: str = "normal"
    name: str | None = None
    norm: str | None = None
    epsilon: float | None = None
    fraction: float | None = None
    mix_ratio: float = 0.5
    manifold_epsilon: float = 0.3

    @property
    def label(self) -> str:
        return self.name or self.kind


@dataclass
class AttackEntry:
    name: str = "pgd_linf"
    kind: str = "pgd"
    norm: str = "linf"
    epsilon: float = 0.3
    iterations: int = 40
    learning_rate: float = 0.005
    restarts: int = 5
    early_stop: bool = True
    samples: int = 200


@dataclass
class ManifoldSpec:
    kind: str = "true"  # true | learned
    scope: str = "class-specific"
    latent_dim: int = 10
    epochs: int = 10
    adversarial_weight: float = 1.0
    lambda_recon: float = 3.0


@dataclass
class ProjectionSpec:
    modes: list = field(default_factory=lambda: ["normal"])
    samples: int = 50
    regular_attack: str | None = "pgd_linf"
    manifold_attack: str | None = "on_manifold"
    bins: int = 20
    knn: int = 50


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    master_seed: int = 0
    output_dir: str = "runs/experiment"
    workers: int = 1
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    architecture: str = "conv_small"
    training: TrainingSpec = field(default_factory=TrainingSpec)
    modes: list = field(default_factory=lambda: [ModeSpec()])
    attacks: list = field(
        default_factory=lambda: [
            AttackEntry(),
            AttackEntry("on_manifold", "on_manifold", "latent-linf", 0.3, samples=500),
        ]
    )
    manifold: ManifoldSpec | None = field(default_factory=ManifoldSpec)
    projection: ProjectionSpec | None = field(default_factory=ProjectionSpec)
    svg: bool = True
    source: str | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source")
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(ENV_OUTPUT) or self.output_dir)

    def resolved_workers(self) -> int:
        value = os.environ.get(ENV_WORKERS)
        return max(1, int(value)) if value else self.workers

    def attack(self, name: str) -> AttackEntry:
        for a in self.attacks:
            if a.name == name:
                return a
        raise KeyError(name)


# parsing ------------------------------------------------------------------------------


def _line_index(node, path=(), out=None) -> dict:
    """Map key paths to 1-based source lines."""
    out = {} if out is None else out
    if node is None:
        return out
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            out[path + (key.value,)] = key.start_mark.line + 1
            _line_index(value, path + (key.value,), out)
            out[path + (key.value,)] = key.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _line_index(item, path + (i,), out)
    return out


class _Diagnostics:
    def __init__(self, source: str, lines: dict):
        self.source = source
        self.lines = lines
        self.entries: list[tuple[int, str]] = []

    @property
    def items(self) -> list[str]:
        return [text for _, text in sorted(self.entries, key=lambda e: e[0])]

    def line_of(self, path: tuple) -> int:
        while path and path not in self.lines:
            path = path[:-1]
        return self.lines.get(path, 1)

    def add(self, path: tuple, message: str) -> None:
        dotted = ".".join(f"[{p}]" if isinstance(p, int) else str(p) for p in path).replace(".[", "[")
        line = self.line_of(path)
        self.entries.append((line, f"{self.source}:{line}: {dotted or '<root>'}: {message}"))


def _build(cls, data, path, diag: _Diagnostics):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        diag.add(path, f"expected a mapping, got {type(data).__name__}")
        return cls()
    names = {f.name for f in fields(cls) if f.name != "source"}
    for key in data:
        if key not in names:
            diag.add(path + (key,), f"unknown key (allowed: {', '.join(sorted(names))})")
    kwargs = {k: v for k, v in data.items() if k in names}
    return cls(**kwargs)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate YAML text; raises ConfigError with line-referenced diagnostics."""
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        raise ConfigError([f"{source}:{line}: invalid YAML: {getattr(exc, 'problem', exc)}"]) from None
    diag = _Diagnostics(source, _line_index(root))
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError([f"{source}:1: the config must be a mapping"])
    cfg = _build(ExperimentConfig, {k: v for k, v in data.items() if k not in ("dataset", "sweep", "training", "modes", "attacks", "manifold", "projection")}, (), diag)
    for key, cls in (("dataset", DatasetSpec), ("sweep", SweepSpec), ("training", TrainingSpec), ("projection", ProjectionSpec), ("manifold", ManifoldSpec)):
        if key in data:
            if data[key] is None and key in ("projection", "manifold"):
                setattr(cfg, key, None)
            else:
                setattr(cfg, key, _build(cls, data[key], (key,), diag))
    for key, cls in (("modes", ModeSpec), ("attacks", AttackEntry)):
        if key in data:
            items = data[key]
            if not isinstance(items, list):
                diag.add((key,), "expected a list")
                items = []
            setattr(cfg, key, [_build(cls, item, (key, i), diag) for i, item in enumerate(items)])
    if cfg.manifold is not None and cfg.manifold.kind is True:
        cfg.manifold.kind = "true"  # YAML reads a bare ``true`` as a boolean
    if "projection" not in data and cfg.projection is not None:
        # the implicit default only applies when everything it names exists
        attack_names = {a.name for a in cfg.attacks}
        mode_names = {m.label for m in cfg.modes}
        pr = cfg.projection
        if (
            cfg.manifold is None
            or cfg.manifold.kind != "true"
            or pr.regular_attack not in attack_names
            or pr.manifold_attack not in attack_names
            or not set(pr.modes) <= mode_names
        ):
            cfg.projection = None
    if isinstance(cfg.sweep.seeds, int) and not isinstance(cfg.sweep.seeds, bool):
        cfg.sweep.seeds = list(range(cfg.sweep.seeds))
    cfg.source = source
    _validate(cfg, diag)
    if diag.items:
        raise ConfigError(diag.items)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"{path}:0: config file not found"])
    return parse_config(path.read_text(encoding="utf-8"), str(path))


# validation ----------------------------------------------------------------------------


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _validate(cfg: ExperimentConfig, diag: _Diagnostics) -> None:
    if not _is_int(cfg.master_seed):
        diag.add(("master_seed",), "must be an integer")
    if not _is_int(cfg.workers) or cfg.workers < 1:
        diag.add(("workers",), "must be an integer >= 1")
    if not isinstance(cfg.output_dir, str) or not cfg.output_dir:
        diag.add(("output_dir",), "must be a non-empty path")
    if cfg.architecture not in ("conv_small", "mlp"):
        diag.add(("architecture",), f"unknown architecture {cfg.architecture!r} (conv_small | mlp)")

    ds = cfg.dataset
    if ds.kind not in ("synthetic", "directory"):
        diag.add(("dataset", "kind"), "must be 'synthetic' or 'directory'")
    if ds.kind == "directory":
        if not ds.prototypes_dir:
            diag.add(("dataset", "prototypes_dir"), "required when dataset.kind is 'directory'")
        elif not Path(ds.prototypes_dir).is_dir():
            diag.add(("dataset", "prototypes_dir"), f"directory {ds.prototypes_dir!r} does not exist")
    for key in ("image_size", "train_per_class", "test_per_class"):
        v = getattr(ds, key)
        if not _is_int(v) or v < 1:
            diag.add(("dataset", key), "must be a positive integer")
    if ds.fonts is not None and (not _is_int(ds.fonts) or ds.fonts < 1):
        diag.add(("dataset", "fonts"), "must be a positive integer or null")

    sw = cfg.sweep
    if not isinstance(sw.n_train, list) or not sw.n_train:
        diag.add(("sweep", "n_train"), "the sweep needs at least one training-set size")
    else:
        available = ds.train_per_class * 10 if _is_int(ds.train_per_class) else 0
        for i, n in enumerate(sw.n_train):
            if not _is_int(n) or n < 2:
                diag.add(("sweep", "n_train", i), "must be an integer >= 2")
            elif available and n > available:
                diag.add(("sweep", "n_train", i), f"N={n} exceeds the {available} generated training examples")
    if not isinstance(sw.seeds, list) or not sw.seeds:
        diag.add(("sweep", "seeds"), "the sweep needs at least one seed")
    elif not all(_is_int(s) for s in sw.seeds):
        diag.add(("sweep", "seeds"), "seeds must be integers")

    tr = cfg.training
    for key in ("epochs", "batch_size"):
        if not _is_int(getattr(tr, key)) or getattr(tr, key) < 1:
            diag.add(("training", key), "must be a positive integer")
    for key in ("learning_rate", "decay"):
        if not _is_num(getattr(tr, key)) or getattr(tr, key) <= 0:
            diag.add(("training", key), "must be > 0")
    if not _is_num(tr.weight_decay) or tr.weight_decay < 0:
        diag.add(("training", "weight_decay"), "must be >= 0")

    if not cfg.modes:
        diag.add(("modes",), "at least one training mode is required")
    labels = set()
    for i, m in enumerate(cfg.modes):
        p = ("modes", i)
        if m.kind not in KINDS:
            diag.add(p + ("kind",), f"unknown mode {m.kind!r} (one of {', '.join(KINDS)})")
            continue
        if m.label in labels:
            diag.add(p + ("name",), f"duplicate mode name {m.label!r}")
        labels.add(m.label)
        if m.epsilon is not None and (not _is_num(m.epsilon) or m.epsilon <= 0):
            diag.add(p + ("epsilon",), f"must be > 0 (got {m.epsilon})")
        if m.norm is not None and m.norm not in NORMS:
            diag.add(p + ("norm",), f"unknown norm {m.norm!r}")
        if m.fraction is not None and (not _is_num(m.fraction) or not 0 < m.fraction <= 1):
            diag.add(p + ("fraction",), "must lie in (0, 1]")
        if (m.kind in NEEDS_MANIFOLD or m.kind == "mixed") and cfg.manifold is None:
            diag.add(p + ("kind",), f"mode {m.kind!r} needs a manifold spec")
        if m.kind == "normal" and (m.epsilon is not None or m.norm is not None):
            diag.add(p, "normal training takes no attack budget")

    names = set()
    for i, a in enumerate(cfg.attacks):
        p = ("attacks", i)
        if a.name in names:
            diag.add(p + ("name",), f"duplicate attack name {a.name!r}")
        names.add(a.name)
        if a.kind not in ATTACK_KINDS:
            diag.add(p + ("kind",), f"unknown attack kind {a.kind!r}")
        if a.norm not in NORMS:
            diag.add(p + ("norm",), f"unknown norm {a.norm!r}")
        if not _is_num(a.epsilon) or a.epsilon <= 0:
            diag.add(p + ("epsilon",), f"must be > 0 (got {a.epsilon})")
        for key in ("iterations", "restarts", "samples"):
            if not _is_int(getattr(a, key)) or getattr(a, key) < 1:
                diag.add(p + (key,), "must be a positive integer")
        if a.kind in ("on_manifold", "random_latent") and cfg.manifold is None:
            diag.add(p + ("kind",), f"attack {a.kind!r} needs a manifold spec")

    if cfg.manifold is not None:
        mf = cfg.manifold
        if mf.kind not in ("true", "learned"):
            diag.add(("manifold", "kind"), "must be 'true' or 'learned'")
        if mf.kind == "true" and ds.kind not in ("synthetic", "directory"):
            diag.add(("manifold", "kind"), "the true manifold needs a generated dataset")
        if mf.scope not in ("class-specific", "class-agnostic"):
            diag.add(("manifold", "scope"), "must be 'class-specific' or 'class-agnostic'")
        if not _is_int(mf.latent_dim) or mf.latent_dim < 1:
            diag.add(("manifold", "latent_dim"), "must be a positive integer")

    pr = cfg.projection
    if pr is not None:
        for key, attack in (("regular_attack", pr.regular_attack), ("manifold_attack", pr.manifold_attack)):
            if attack is not None and attack not in names:
                diag.add(("projection", key), f"no attack named {attack!r}")
        for m in pr.modes:
            if m not in labels:
                diag.add(("projection", "modes"), f"no mode named {m!r}")
        if pr.manifold_attack is not None and cfg.manifold is not None and cfg.manifold.kind != "true":
            diag.add(("projection", "manifold_attack"), "decoder projections need the true manifold")
        if cfg.manifold is None and (pr.regular_attack or pr.manifold_attack):
            diag.add(("projection",), "decoder projections need a manifold spec")
        for key in ("samples", "bins", "knn"):
            if not _is_int(getattr(pr, key)) or getattr(pr, key) < 1:
                diag.add(("projection", key), "must be a positive integer")

    # dry-run path creation
    out = cfg.resolved_output_dir()
    probe = out
    while not probe.exists() and probe != probe.parent:
        probe = probe.parent
    if probe.exists() and not os.access(probe, os.W_OK):
        diag.add(("output_dir",), f"cannot create {out}: {probe} is not writable")


def mode_default_budget(kind: str) -> tuple:
    return DEFAULT_BUDGETS.get(kind, (None, None))
