"""Differentiable synthetic character dataset.

An image is fully determined by a glyph prototype (class and font) and a
6-parameter pose: translation (t1, t2), shear (lambda1, lambda2), scale s and
rotation r. Poses are stored as arrays in that order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import Tensor, affine_warp
from ..autodiff import serialize
from .glyphs import GlyphPrototype

POSE_NAMES = ("t1", "t2", "lambda1", "lambda2", "s", "r")
POSE_LOW = np.array([-0.2, -0.2, -0.5, -0.5, 0.75, -np.pi / 2])
POSE_HIGH = np.array([0.2, 0.2, 0.5, 0.5, 1.15, np.pi / 2])
IDENTITY_POSE = np.array([0.0, 0.0, 0.0, 0.0, 1.0, 0.0])


@dataclass(frozen=True)
class LatentPose:
    t1: float = 0.0
    t2: float = 0.0
    lambda1: float = 0.0
    lambda2: float = 0.0
    s: float = 1.0
    r: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.t1, self.t2, self.lambda1, self.lambda2, self.s, self.r], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "LatentPose":
        return cls(*(float(v) for v in values))

    def in_range(self) -> bool:
        v = self.as_array()
        return bool(np.all(v >= POSE_LOW) and np.all(v <= POSE_HIGH))


def _matrix_entries(pose: np.ndarray) -> np.ndarray:
    t1, t2, l1, l2, s, r = np.moveaxis(pose, -1, 0)
    c, sn = np.cos(r), np.sin(r)
    m = np.empty(pose.shape[:-1] + (2, 3), dtype=pose.dtype)
    m[..., 0, 0] = c * s - sn * s * l1
    m[..., 0, 1] = -sn * s + c * s * l1
    m[..., 0, 2] = t1
    m[..., 1, 0] = c * s * l2 + sn * s
    m[..., 1, 1] = -sn * s * l2 + c * s
    m[..., 1, 2] = t2
    return m


def compose_affine(pose) -> np.ndarray:
    """2x3 affine matrix for a pose (LatentPose, length-6 array, or (N, 6) array)."""
    if isinstance(pose, LatentPose):
        pose = pose.as_array()
    pose = np.asarray(pose, dtype=np.float64)
    if not np.all(np.isfinite(pose)):
        raise ValueError("pose must be finite")
    return _matrix_entries(pose)


def compose_affine_tensor(poses: Tensor) -> Tensor:
    """Differentiable (B, 6) -> (B, 2, 3) version of :func:`compose_affine`."""
    p = poses.data
    out = _matrix_entries(p)

    def back(g):
        t1, t2, l1, l2, s, r = np.moveaxis(p, -1, 0)
        c, sn = np.cos(r), np.sin(r)
        g00, g01, g10, g11 = g[..., 0, 0], g[..., 0, 1], g[..., 1, 0], g[..., 1, 1]
        grad = np.empty_like(p)
        grad[..., 0] = g[..., 0, 2]
        grad[..., 1] = g[..., 1, 2]
        grad[..., 2] = g00 * (-sn * s) + g01 * (c * s)
        grad[..., 3] = g10 * (c * s) + g11 * (-sn * s)
        grad[..., 4] = (
            g00 * (c - sn * l1) + g01 * (-sn + c * l1) + g10 * (c * l2 + sn) + g11 * (-sn * l2 + c)
        )
        grad[..., 5] = s * (
            g00 * (-sn - c * l1) + g01 * (-c - sn * l1) + g10 * (-sn * l2 + c) + g11 * (-c * l2 - sn)
        )
        return (grad,)

    return Tensor.from_op(out, (poses,), back)


def decode_batch(bitmaps: np.ndarray, poses: Tensor) -> Tensor:
    """True decoder over a batch: warp each prototype bitmap by its pose, clamp to [0, 1]."""
    if not isinstance(poses, Tensor):
        poses = Tensor(poses)
    return affine_warp(Tensor(bitmaps), compose_affine_tensor(poses)).clip(0.0, 1.0)


def true_decoder(prototype, pose) -> np.ndarray:
    """Render one image (1, H, W) from a prototype (GlyphPrototype or bitmap) and a pose."""
    bitmap = prototype.bitmap if isinstance(prototype, GlyphPrototype) else np.asarray(prototype)
    if isinstance(pose, LatentPose):
        pose = pose.as_array()
    out = decode_batch(bitmap[None], Tensor(np.asarray(pose, dtype=np.float64)[None]))
    return out.data[0]


@dataclass
class SyntheticDataset:
    images: np.ndarray  # (N, 1, H, W)
    labels: np.ndarray  # (N,)
    poses: np.ndarray  # (N, 6)
    prototype_ids: np.ndarray  # (N,)
    prototypes: np.ndarray  # (P, 1, H, W)
    prototype_classes: np.ndarray  # (P,)
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.prototype_classes.max()) + 1

    def subset(self, index) -> "SyntheticDataset":
        index = np.asarray(index)
        return SyntheticDataset(
            self.images[index],
            self.labels[index],
            self.poses[index],
            self.prototype_ids[index],
            self.prototypes,
            self.prototype_classes,
            self.seed,
            dict(self.meta),
        )

    def head(self, n: int) -> "SyntheticDataset":
        if n > len(self):
            raise ValueError(f"requested {n} examples but the dataset holds {len(self)}")
        return self.subset(np.arange(n))

    def bitmaps(self, index=None) -> np.ndarray:
        ids = self.prototype_ids if index is None else self.prototype_ids[index]
        return self.prototypes[ids]

    def redecode(self, index=None) -> np.ndarray:
        poses = self.poses if index is None else self.poses[index]
        return decode_batch(self.bitmaps(index), Tensor(poses)).data

    # on-disk format: tensor container + JSON index ---------------------------
    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        serialize.save(
            directory / "images.rbt",
            {"images": self.images, "prototypes": self.prototypes},
            {"type": "synthetic_dataset"},
        )
        index = {
            "seed": self.seed,
            "labels": self.labels.tolist(),
            "poses": self.poses.tolist(),
            "pose_names": list(POSE_NAMES),
            "prototype_ids": self.prototype_ids.tolist(),
            "prototype_classes": self.prototype_classes.tolist(),
            "meta": self.meta,
        }
        (directory / "index.json").write_text(json.dumps(index), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "SyntheticDataset":
        directory = Path(directory)
        blocks, _ = serialize.load(directory / "images.rbt")
        index = json.loads((directory / "index.json").read_text(encoding="utf-8"))
        return cls(
            images=blocks["images"],
            labels=np.array(index["labels"], dtype=np.int64),
            poses=np.array(index["poses"], dtype=np.float64).reshape(-1, 6),
            prototype_ids=np.array(index["prototype_ids"], dtype=np.int64),
            prototypes=blocks["prototypes"],
            prototype_classes=np.array(index["prototype_classes"], dtype=np.int64),
            seed=index["seed"],
            meta=index.get("meta", {}),
        )


def sample_pose(rng: np.random.Generator, low=POSE_LOW, high=POSE_HIGH) -> np.ndarray:
    return rng.uniform(low, high)


def generate(
    prototypes: list[GlyphPrototype],
    n_per_class: int,
    seed: int,
    index_offset: int = 0,
    low=POSE_LOW,
    high=POSE_HIGH,
    chunk: int = 2000,
) -> SyntheticDataset:
    """Balanced dataset with uniformly sampled poses.

    Example ``i`` has class ``i % K`` and draws its font and pose from its own
    stream seeded by ``(seed, index_offset + i)``, so any prefix of the dataset
    is balanced within one example per class and disjoint index ranges give
    disjoint samples.
    """
    if not prototypes:
        raise ValueError("need at least one prototype")
    classes = np.array([p.class_id for p in prototypes])
    n_classes = int(classes.max()) + 1
    missing = sorted(set(range(n_classes)) - set(classes.tolist()))
    if missing:
        raise ValueError(f"no prototype for classes {missing}")
    bank = np.stack([p.bitmap for p in prototypes]).astype(np.float64)
    by_class = [np.flatnonzero(classes == c) for c in range(n_classes)]

    n = n_per_class * n_classes
    labels = np.arange(n) % n_classes
    poses = np.empty((n, 6))
    proto_ids = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = np.random.default_rng([seed, index_offset + i])
        options = by_class[labels[i]]
        proto_ids[i] = options[rng.integers(len(options))]
        poses[i] = rng.uniform(low, high)

    images = np.empty((n,) + bank.shape[1:])
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        images[sl] = decode_batch(bank[proto_ids[sl]], Tensor(poses[sl])).data
    return SyntheticDataset(
        images=images,
        labels=labels.astype(np.int64),
        poses=poses,
        prototype_ids=proto_ids,
        prototypes=bank,
        prototype_classes=classes,
        seed=seed,
        meta={"index_offset": index_offset, "n_per_class": n_per_class},
    )


TEST_INDEX_OFFSET = 10_000_000


def make_splits(prototypes, n_train_per_class: int, n_test_per_class: int, seed: int):
    """Train and test sets drawn from disjoint per-index streams."""
    train = generate(prototypes, n_train_per_class, seed)
    test = generate(prototypes, n_test_per_class, seed, index_offset=TEST_INDEX_OFFSET)
    return train, test
