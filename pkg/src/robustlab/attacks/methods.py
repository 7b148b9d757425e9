"""PGD, Carlini-Wagner, on-manifold, transformation, transfer and random attacks."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, affine_warp
from ..autodiff.optim import ArrayAdam
from ..fonts.synth import IDENTITY_POSE, compose_affine_tensor
from .base import AttackBatch, AttackConfig, batch_norms, init_perturbation, project_ball, success_rate
from .engine import Problem, package, run_ascent

CHUNK = 500


def _chunked(fn, x, y, indices, *args, **kwargs) -> AttackBatch:
    """Apply a batched attack in chunks to bound memory; results keep input order."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    indices = np.arange(len(x)) if indices is None else np.asarray(indices, dtype=np.int64)
    if len(x) <= CHUNK:
        return fn(x, y, indices, *args, **kwargs)
    parts = [fn(x[s : s + CHUNK], y[s : s + CHUNK], indices[s : s + CHUNK], *args, **kwargs) for s in range(0, len(x), CHUNK)]
    return AttackBatch.merge(parts)


# image-space PGD -----------------------------------------------------------------


def _image_problem(x, config: AttackConfig) -> Problem:
    ball = config.ball

    def render(var, rows):
        return (Tensor(x[rows]) + var).clip(0.0, 1.0)

    def project(var, rows):
        var = project_ball(var, ball, config.epsilon)
        return np.clip(x[rows] + var, 0.0, 1.0) - x[rows]

    def start(rng, row):
        return init_perturbation(rng, ball, config.epsilon, x.shape[1:])

    return Problem(x.shape[1:], render, project, start)


def _pgd(x, y, indices, model, config, optimize=True):
    out = run_ascent(model, x, y, _image_problem(x, config), config, indices, optimize=optimize)
    return package(config.ball, x, y, out)


def pgd_attack(model, x, y, config: AttackConfig | None = None, indices=None) -> AttackBatch:
    """Projected Adam ascent on the cross-entropy within an L-inf or L2 ball.

    After every step the perturbation is projected onto the ball and
    ``x + delta`` is clamped to [0, 1]. ``indices`` name the inputs for the
    per-input random streams (default: position in the batch).
    """
    config = config or AttackConfig()
    if config.norm not in ("linf", "l2"):
        raise ValueError(f"pgd_attack works in image space; got norm {config.norm!r}")
    return _chunked(_pgd, x, y, indices, model, config)


# Carlini-Wagner L2 ----------------------------------------------------------------


CW_INSET = 1e-6


def cw_objective(logits: np.ndarray, labels, kappa: float) -> np.ndarray:
    """``max(-kappa, l_y - max_{y' != y} l_y')`` per row."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    rows = np.arange(len(logits))
    true = logits[rows, labels]
    other = logits.copy()
    other[rows, labels] = -np.inf
    return np.maximum(-kappa, true - other.max(axis=1))


def _cw(x, y, indices, model, config):
    n = len(x)
    flat_x = x.reshape(n, -1)
    omega = np.arctanh(2.0 * np.clip(x, CW_INSET, 1.0 - CW_INSET) - 1.0)
    adam = ArrayAdam(omega.shape, config.learning_rate)
    onehot = np.zeros((n, model.num_classes))
    onehot[np.arange(n), y] = 1.0
    with model.evaluating():
        before = model.predict(x)
        for it in range(config.cw_iterations + 1):
            w = Tensor(omega, requires_grad=it < config.cw_iterations)
            adv = (w.tanh() + 1.0) * 0.5
            delta = adv.reshape(n, -1) - Tensor(flat_x)
            dist = ((delta * delta).sum(axis=1) + 1e-24).sqrt()
            logits = model(adv)
            true = (logits * Tensor(onehot)).sum(axis=1)
            other = (logits + Tensor(onehot * -1e9)).max(axis=1)
            margin = (true - other).maximum(-config.cw_kappa)
            objective = margin + dist * config.cw_lambda
            if it == config.cw_iterations:
                break
            objective.sum().backward()
            omega = omega + adam.step(w.grad, sign=-1.0)
    pred = np.argmax(logits.data, axis=1)
    delta_img = adv.data - x
    return AttackBatch(
        norm="l2",
        success=pred != y,
        adversarial=adv.data,
        perturbation=delta_img,
        iterations_used=np.full(n, config.cw_iterations),
        restart_index=np.zeros(n, dtype=np.int64),
        final_loss=objective.data,
        perturbation_norm=batch_norms(delta_img, "l2"),
        labels=y,
        predicted_before=before,
        predicted_after=pred,
        indices=indices,
    )


def cw_attack(model, x, y, config: AttackConfig | None = None, indices=None) -> AttackBatch:
    """Carlini-Wagner L2 attack through the tanh reparameterisation.

    Minimises ``F(x', y) + lambda * ||x' - x||_2`` over ``omega`` with
    ``x' = (tanh(omega) + 1) / 2``, starting from the preimage of ``x``
    clamped to ``[1e-6, 1 - 1e-6]``. Success is judged on the final iterate.
    """
    config = config or AttackConfig(norm="l2", epsilon=1.5)
    return _chunked(_cw, x, y, indices, model, config)


# latent-space attacks -------------------------------------------------------------


def _latent_box(manifold, config: AttackConfig):
    if config.latent_box is not None:
        low, high = config.latent_box
        d = manifold.latent_dim
        return np.broadcast_to(np.asarray(low, dtype=np.float64), (d,)), np.broadcast_to(np.asarray(high, dtype=np.float64), (d,))
    return np.asarray(manifold.lower, dtype=np.float64), np.asarray(manifold.upper, dtype=np.float64)


def _latent_problem(manifold, z, config: AttackConfig, decode_rows) -> Problem:
    low, high = _latent_box(manifold, config)
    base = np.clip(z, low, high)
    ball = config.ball

    def render(var, rows):
        return manifold.decode(Tensor(base[rows]) + var, decode_rows[rows])

    def project(var, rows):
        var = project_ball(var, ball, config.epsilon)
        return np.clip(base[rows] + var, low, high) - base[rows]

    def start(rng, row):
        return init_perturbation(rng, ball, config.epsilon, (z.shape[1],))

    return Problem((z.shape[1],), render, project, start), base


def _on_manifold(x, y, indices, model, manifold, z, decode_rows, config, optimize=True):
    problem, base = _latent_problem(manifold, z, config, decode_rows)
    out = run_ascent(model, x, y, problem, config, indices, optimize=optimize)
    var, img = out[0], out[1]
    return package(
        config.norm if config.norm.startswith("latent") else "latent-" + config.ball,
        x,
        y,
        out,
        extra={"latent": base + var, "image_delta": img - x},
    )


def _latent_codes(manifold, x, z, rows):
    if z is not None:
        return np.asarray(z, dtype=np.float64)
    if not hasattr(manifold, "encode"):
        raise ValueError("the manifold has no encoder; pass latent codes explicitly")
    return manifold.encode(x, rows)


def on_manifold_attack(model, manifold, x, y, config: AttackConfig | None = None, z=None, indices=None, optimize: bool = True) -> AttackBatch:
    """Perturb latent codes within an eta-ball and decode, maximising the loss.

    ``manifold`` is a :class:`TrueManifold` (poses, prototype per input), a
    learned :class:`ManifoldModel` or :class:`ClassManifolds` (inputs are
    routed to the model of their label). ``z`` defaults to the stored poses
    or the encoder means. The adversarial image is exactly ``dec(z + zeta)``
    with ``z + zeta`` inside the latent box.
    """
    config = config or AttackConfig(norm="latent-linf", epsilon=0.3)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    indices = np.arange(len(x)) if indices is None else np.asarray(indices, dtype=np.int64)
    rows = np.arange(len(x))
    if hasattr(manifold, "models"):  # one learned model per class
        parts, order = [], []
        for label in np.unique(y):
            sel = np.flatnonzero(y == label)
            sub = manifold[label]
            codes = _latent_codes(sub, x[sel], None if z is None else np.asarray(z)[sel], None)
            parts.append(_on_manifold_chunks(model, sub, x[sel], y[sel], codes, np.arange(len(sel)), indices[sel], config, optimize))
            order.append(sel)
        return AttackBatch.merge(parts, np.concatenate(order))
    codes = _latent_codes(manifold, x, z, rows)
    return _on_manifold_chunks(model, manifold, x, y, codes, rows, indices, config, optimize)


def _on_manifold_chunks(model, manifold, x, y, codes, decode_rows, indices, config, optimize):
    parts = []
    for s in range(0, max(len(x), 1), CHUNK):
        sl = slice(s, s + CHUNK)
        parts.append(_on_manifold(x[sl], y[sl], indices[sl], model, manifold, codes[sl], decode_rows[sl], config, optimize))
    return parts[0] if len(parts) == 1 else AttackBatch.merge(parts)


# transformations --------------------------------------------------------------------


def warp_by_offset(images: Tensor, offsets: Tensor) -> Tensor:
    """Apply the pose ``identity + offset`` to each image."""
    poses = offsets + Tensor(np.broadcast_to(IDENTITY_POSE, offsets.shape).copy())
    return affine_warp(images, compose_affine_tensor(poses)).clip(0.0, 1.0)


def _transform_problem(x, config: AttackConfig) -> Problem:
    def render(var, rows):
        return warp_by_offset(Tensor(x[rows]), var)

    def project(var, rows):
        return project_ball(var, "linf", config.epsilon)

    def start(rng, row):
        return init_perturbation(rng, "linf", config.epsilon, (6,))

    return Problem((6,), render, project, start)


def _transform(x, y, indices, model, config, optimize=True):
    out = run_ascent(model, x, y, _transform_problem(x, config), config, indices, optimize=optimize)
    return package("transform-linf", x, y, out, extra={"image_delta": out[1] - x})


def transformation_attack(model, x, y, config: AttackConfig | None = None, indices=None) -> AttackBatch:
    """Search affine pose offsets ``t`` with ``||t||_inf <= eta`` maximising the loss.

    The image is warped by the pose ``identity + t`` (translation, shear,
    scale offset, rotation), so ``t = 0`` returns the input unchanged.
    """
    config = config or AttackConfig(norm="transform-linf", epsilon=0.3)
    return _chunked(_transform, x, y, indices, model, config)


# random baselines -------------------------------------------------------------------


def random_perturbation_baseline(model, x, y, space: str = "image", config: AttackConfig | None = None, manifold=None, z=None, indices=None) -> AttackBatch:
    """Uniform draws in the perturbation ball, one per restart, without optimisation.

    ``space`` is ``image``, ``latent`` or ``transform``; the draw, the
    feasibility projection and the success test are those of the matching
    attack.
    """
    config = config or AttackConfig()
    if space == "image":
        cfg = config if config.norm in ("linf", "l2") else config.with_(norm=config.ball)
        return _chunked(_pgd, x, y, indices, model, cfg, optimize=False)
    if space == "latent":
        if manifold is None:
            raise ValueError("a latent-space baseline needs a manifold")
        return on_manifold_attack(model, manifold, x, y, config, z=z, indices=indices, optimize=False)
    if space == "transform":
        return _chunked(_transform, x, y, indices, model, config, optimize=False)
    raise ValueError(f"unknown perturbation space {space!r}")


# transfer ------------------------------------------------------------------------------


def transfer_attack(source_model, target_model, x, y, config: AttackConfig | None = None, indices=None) -> dict:
    """Craft PGD examples on ``source_model`` and test them on ``target_model``.

    Only inputs that both models classify correctly count. Returns the
    success rate, the counts and the source-side attack results.
    """
    config = config or AttackConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    src_ok = source_model.predict(x) == y
    tgt_ok = target_model.predict(x) == y
    joint = src_ok & tgt_ok
    if not joint.any():
        raise ValueError("no input is classified correctly by both models")
    crafted = pgd_attack(source_model, x, y, config, indices)
    fooled = target_model.predict(crafted.adversarial) != y
    return {
        "success_rate": success_rate(fooled, joint),
        "eligible": int(joint.sum()),
        "successes": int((fooled & joint).sum()),
        "target_success": fooled,
        "eligible_mask": joint,
        "source": crafted,
    }


def attack_success_rate(batch: AttackBatch, eligible=None) -> float | None:
    """Success rate of a batch over the inputs correctly classified before the attack."""
    eligible = batch.predicted_before == batch.labels if eligible is None else eligible
    return success_rate(batch.success, eligible)

