"""Projections onto a manifold and distance diagnostics.

Two projections are offered. ``project_decoder`` searches the latent space
of a differentiable decoder for the closest decoded image. ``project_knn``
approximates the manifold locally by the span of nearest training images and
solves a least-squares problem.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from ..autodiff import Tensor, cross_entropy, no_grad
from ..autodiff.optim import ArrayAdam

METHODS = ("decoder", "knn_test_centered", "knn_mean_centered")


@dataclass
class ProjectionResult:
    """Projections of a batch; row ``i`` belongs to input ``i``."""

    projected: np.ndarray
    coefficients: np.ndarray  # latent codes or least-squares weights
    distance: np.ndarray
    method: str
    objective: np.ndarray | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown projection method {self.method!r}")

    def __len__(self) -> int:
        return len(self.distance)


def _squared_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a - b).reshape(len(a), -1)
    return (d * d).sum(axis=1)


def project_decoder(
    targets: np.ndarray,
    decoder,
    lower,
    upper,
    starts,
    iterations: int = 100,
    learning_rate: float = 0.09,
    decay: float = 0.95,
    decay_every: int = 10,
) -> ProjectionResult:
    """Minimise ``||target - dec(z)||^2`` over ``z`` in the box ``[lower, upper]``.

    ``decoder`` exposes ``decode(z_tensor, rows)``. ``starts`` is a list of
    (n, d) initial codes; each is optimised with Adam (learning rate decayed
    every ``decay_every`` steps) and projected onto the box after every step.
    The best iterate over all starts, including the starts themselves, is
    returned.
    """
    targets = np.asarray(targets, dtype=np.float64)
    n = len(targets)
    if isinstance(starts, np.ndarray):
        starts = [starts]
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    rows = np.arange(n)
    best_z = None
    best_obj = np.full(n, np.inf)
    best_img = np.zeros_like(targets)

    def keep(z, imgs, obj):
        nonlocal best_z
        better = obj < best_obj
        if best_z is None:
            best_z = z.copy()
        best_z[better] = z[better]
        best_img[better] = imgs[better]
        best_obj[better] = obj[better]

    for start in starts:
        z = np.clip(np.array(start, dtype=np.float64), lower, upper)
        adam = ArrayAdam(z.shape, learning_rate)
        for it in range(iterations + 1):
            zt = Tensor(z, requires_grad=it < iterations)
            imgs = decoder.decode(zt, rows)
            diff = (imgs - Tensor(targets)).reshape(n, -1)
            obj = (diff * diff).sum(axis=1)
            keep(z, imgs.data, obj.data)
            if it == iterations:
                break
            obj.sum().backward()
            grad = np.zeros_like(z) if zt.grad is None else zt.grad
            if it and it % decay_every == 0:
                adam.lr *= decay
            z = np.clip(z + adam.step(grad, sign=-1.0), lower, upper)
    # the kept image is dec(best_z) by construction
    distance = np.sqrt(_squared_distance(targets, best_img))
    return ProjectionResult(best_img, best_z, distance, "decoder", best_obj)


def project_with_restarts(
    targets: np.ndarray,
    decoder,
    lower,
    upper,
    init=None,
    restarts: int = 2,
    seed=0,
    **kwargs,
) -> ProjectionResult:
    """Decoder projection from ``init`` (when given) plus uniform draws in the box."""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    rng = np.random.default_rng(seed)
    starts = [] if init is None else [np.asarray(init, dtype=np.float64)]
    starts += [rng.uniform(lower, upper, size=(len(targets), len(lower))) for _ in range(restarts)]
    if not starts:
        raise ValueError("need an initial code or at least one random restart")
    return project_decoder(targets, decoder, lower, upper, starts, **kwargs)


# nearest-neighbour subspace --------------------------------------------------------


def least_squares(X: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Minimum-norm solution of ``min ||X beta - delta||`` via pivoted QR."""
    cond = np.finfo(np.float64).eps * max(X.shape)
    beta, *_ = scipy.linalg.lstsq(X, delta, lapack_driver="gelsy", cond=cond)
    return beta


def subspace_projection(X: np.ndarray, delta: np.ndarray):
    """Project ``delta`` onto the column span of ``X``; returns (beta, residual)."""
    beta = least_squares(X, delta)
    return beta, delta - X @ beta


def nearest_neighbors(query: np.ndarray, pool: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` pool rows closest to ``query`` in L2, nearest first."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(pool):
        raise ValueError(f"k={k} exceeds the {len(pool)} available training images")
    flat = pool.reshape(len(pool), -1)
    q = query.reshape(-1)
    d2 = (flat * flat).sum(axis=1) - 2.0 * flat @ q + q @ q
    idx = np.argpartition(d2, k - 1)[:k] if k < len(pool) else np.arange(len(pool))
    return idx[np.lexsort((idx, d2[idx]))]


def project_knn(
    adversarial: np.ndarray,
    clean: np.ndarray,
    train_images: np.ndarray,
    k: int = 50,
    anchor: str = "test_image",
) -> ProjectionResult:
    """Distance of adversarial inputs to the span of their nearest training images.

    For each input the columns of ``X`` are ``x_i - a`` over its ``k`` nearest
    training images, where the anchor ``a`` is the clean test image
    (``test_image``) or the mean of the neighbours (``neighbor_mean``). The
    perturbation ``delta = adversarial - clean`` is projected onto span(X),
    placed at the anchor; the distance is the norm of the residual.
    """
    if anchor not in ("test_image", "neighbor_mean"):
        raise ValueError(f"anchor must be 'test_image' or 'neighbor_mean', got {anchor!r}")
    adversarial = np.asarray(adversarial, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    if k > len(train_images):
        raise ValueError(f"k={k} exceeds the {len(train_images)} available training images")
    n = len(adversarial)
    shape = adversarial.shape[1:]
    projected = np.empty_like(adversarial)
    coefs = np.empty((n, k))
    dist = np.empty(n)
    for i in range(n):
        neighbors = train_images[nearest_neighbors(adversarial[i], train_images, k)].reshape(k, -1)
        base = clean[i].reshape(-1) if anchor == "test_image" else neighbors.mean(axis=0)
        X = (neighbors - base).T
        delta = (adversarial[i] - clean[i]).reshape(-1)
        beta, residual = subspace_projection(X, delta)
        coefs[i] = beta
        projected[i] = (base + X @ beta).reshape(shape)
        dist[i] = np.sqrt(residual @ residual)
    method = "knn_test_centered" if anchor == "test_image" else "knn_mean_centered"
    return ProjectionResult(projected, coefs, dist, method)


# diagnostics -----------------------------------------------------------------------


@dataclass
class Histogram:
    edges: np.ndarray
    mass: np.ndarray

    def rows(self):
        for left, right, m in zip(self.edges[:-1], self.edges[1:], self.mass):
            yield {"bin_left": repr(float(left)), "bin_right": repr(float(right)), "mass": repr(float(m))}

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=("bin_left", "bin_right", "mass"), lineterminator="\n")
            writer.writeheader()
            writer.writerows(self.rows())


def distance_histogram(results, bins=20, range=None) -> Histogram:
    """Normalised histogram of projection distances.

    ``results`` is a ProjectionResult, a list of them, or an array of
    distances. ``bins`` is a count or an array of edges.
    """
    if isinstance(results, ProjectionResult):
        distances = results.distance
    elif isinstance(results, (list, tuple)) and results and isinstance(results[0], ProjectionResult):
        distances = np.concatenate([r.distance for r in results])
    else:
        distances = np.asarray(results, dtype=np.float64).ravel()
    if distances.size == 0:
        raise ValueError("cannot build a histogram of no distances")
    counts, edges = np.histogram(distances, bins=bins, range=range)
    total = counts.sum()
    if total == 0:
        raise ValueError("no distances fall inside the histogram range")
    return Histogram(edges, counts / total)


def decoder_jacobian(decoder, z: np.ndarray, rows=None) -> np.ndarray:
    """Exact Jacobian (pixels x latent_dim) of ``decoder`` at a single code ``z``.

    Every output pixel gets its own copy of ``z`` in one batch so that a
    single reverse pass yields all rows of the Jacobian.
    """
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    with no_grad():
        probe = decoder.decode(Tensor(z), None if rows is None else np.asarray(rows)[:1])
    pixels = probe.data[0].size
    zt = Tensor(np.repeat(z, pixels, axis=0), requires_grad=True)
    sel_rows = None if rows is None else np.repeat(np.asarray(rows)[:1], pixels)
    out = decoder.decode(zt, sel_rows).reshape(pixels, pixels)
    picked = out * Tensor(np.eye(pixels))
    picked.sum().backward()
    return zt.grad


def subspace_cosine(g: np.ndarray, basis: np.ndarray) -> float | None:
    """``||P g|| / ||g||`` for the projection ``P`` onto span(basis columns); None if g = 0."""
    g = np.asarray(g, dtype=np.float64).ravel()
    norm = np.sqrt(g @ g)
    if norm == 0:
        return None
    _, residual = subspace_projection(basis, g)
    along = np.sqrt(max(norm * norm - residual @ residual, 0.0))
    return float(min(along / norm, 1.0))


def loss_gradient(model, x: np.ndarray, y) -> np.ndarray:
    """Image-space gradient of the cross-entropy for each input (model in eval mode)."""
    with model.evaluating():
        xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
        cross_entropy(model(xt), np.asarray(y), reduction="sum").backward()
    return xt.grad


def tangent_alignment(model, decoder, x: np.ndarray, y, z: np.ndarray, rows=None) -> np.ndarray:
    """Cosine between the loss gradient and the decoder's tangent space, per input.

    ``z`` holds each input's latent code; undefined cosines (zero gradient)
    are returned as NaN.
    """
    grads = loss_gradient(model, x, y)
    rows = np.arange(len(x)) if rows is None else np.asarray(rows)
    out = np.empty(len(x))
    for i in range(len(x)):
        J = decoder_jacobian(decoder, z[i], rows[i : i + 1])
        c = subspace_cosine(grads[i], J)
        out[i] = np.nan if c is None else c
    return out
