"""The synthetic dataset's exact generative process viewed as a latent decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor
from ..fonts.synth import POSE_HIGH, POSE_LOW, decode_batch


@dataclass
class TrueManifold:
    """Decoder over poses with each input's prototype (font and class) held fixed.

    ``bitmaps[i]`` is the prototype of input ``i``; ``decode(z, rows)`` warps
    ``bitmaps[rows]`` by the poses in ``z``.
    """

    bitmaps: np.ndarray  # (n, 1, H, W)
    poses: np.ndarray | None = None  # (n, 6) known codes, when available
    lower: np.ndarray = None
    upper: np.ndarray = None

    def __post_init__(self):
        self.bitmaps = np.asarray(self.bitmaps, dtype=np.float64)
        self.lower = POSE_LOW.copy() if self.lower is None else np.asarray(self.lower, dtype=np.float64)
        self.upper = POSE_HIGH.copy() if self.upper is None else np.asarray(self.upper, dtype=np.float64)

    latent_dim = 6
    name = "true"

    @classmethod
    def for_dataset(cls, dataset, index=None) -> "TrueManifold":
        index = np.arange(len(dataset)) if index is None else np.asarray(index)
        return cls(dataset.bitmaps(index), dataset.poses[index])

    def subset(self, rows) -> "TrueManifold":
        rows = np.asarray(rows)
        poses = None if self.poses is None else self.poses[rows]
        return TrueManifold(self.bitmaps[rows], poses, self.lower, self.upper)

    def decode(self, z: Tensor, rows=None) -> Tensor:
        bitmaps = self.bitmaps if rows is None else self.bitmaps[np.asarray(rows)]
        return decode_batch(bitmaps, z)

    def encode(self, x: np.ndarray, rows=None) -> np.ndarray:
        if self.poses is None:
            raise ValueError("the true manifold has no encoder; stored poses are required")
        return self.poses if rows is None else self.poses[np.asarray(rows)]
