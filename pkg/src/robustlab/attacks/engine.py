"""Batched projected ascent shared by every gradient-based attack.

An attack is described by a ``Problem``: a variable per input (image delta,
latent offset or pose offset), a differentiable ``render`` that maps the
variable to model inputs, a ``project`` onto the feasible set and a random
``start``. The engine runs Adam ascent on the per-input cross-entropy with
restarts and early stopping, vectorised over the inputs that are still
active.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..autodiff import Tensor, cross_entropy, no_grad
from ..autodiff.optim import ArrayAdam
from .base import AttackBatch, AttackConfig, batch_norms, stream


@dataclass
class Problem:
    shape: tuple  # per-input variable shape
    render: Callable  # (Tensor var (n, *shape), rows) -> Tensor images (n, *input_shape)
    project: Callable  # (var array (n, *shape), rows) -> feasible var
    start: Callable  # (rng, row) -> initial var of ``shape`` (before projection)


def _evaluate(model, problem: Problem, var: np.ndarray, rows: np.ndarray, labels: np.ndarray, with_grad: bool):
    if with_grad:
        v = Tensor(var, requires_grad=True)
        images = problem.render(v, rows)
        logits = model(images)
        losses = cross_entropy(logits, labels, reduction="none")
        out = (losses.data.copy(), np.argmax(logits.data, axis=1), images.data)
        losses.sum().backward()
        grad = np.zeros_like(var) if v.grad is None else v.grad
        return out + (grad,)
    with no_grad():
        images = problem.render(Tensor(var), rows)
        logits = model(images)
        losses = cross_entropy(logits, labels, reduction="none")
    return losses.data, np.argmax(logits.data, axis=1), images.data, None


def run_ascent(model, x: np.ndarray, y: np.ndarray, problem: Problem, config: AttackConfig, indices=None, optimize: bool = True):
    """Run the attack described by ``problem`` on a batch and collect results.

    With ``optimize=False`` only the random starts are evaluated (one draw per
    restart, no gradient steps).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(x)
    indices = np.arange(n) if indices is None else np.asarray(indices, dtype=np.int64)
    shape = tuple(problem.shape)

    with model.evaluating():
        predicted_before = model.predict(x) if n else np.zeros(0, dtype=np.int64)

        # best report per input across restarts
        done = np.zeros(n, dtype=bool)  # a successful restart has been recorded
        rep_var = np.zeros((n,) + shape)
        rep_img = np.array(x, copy=True)
        rep_loss = np.full(n, -np.inf)
        rep_pred = np.array(predicted_before, copy=True)
        rep_iter = np.zeros(n, dtype=np.int64)
        rep_restart = np.zeros(n, dtype=np.int64)

        for restart in range(config.restarts):
            rows = np.flatnonzero(~done)
            if rows.size == 0:
                break
            var = np.stack([problem.start(stream(config.seed, indices[r], restart), r) for r in rows]) if rows.size else None
            var = problem.project(var, rows)

            best_var = var.copy()
            best_img = np.empty((rows.size,) + x.shape[1:])
            best_loss = np.full(rows.size, -np.inf)
            best_pred = np.zeros(rows.size, dtype=np.int64)
            best_iter = np.zeros(rows.size, dtype=np.int64)
            stopped = np.zeros(rows.size, dtype=bool)
            adam = ArrayAdam((rows.size,) + shape, config.learning_rate)

            iterations = config.iterations if optimize else 0
            for it in range(iterations + 1):
                live = np.flatnonzero(~stopped)
                if live.size == 0:
                    break
                need_grad = it < iterations
                loss, pred, imgs, grad = _evaluate(model, problem, var[live], rows[live], y[rows[live]], need_grad)
                fooled = pred != y[rows[live]]
                better = loss > best_loss[live]
                if config.early_stop:
                    better |= fooled
                upd = live[better]
                best_var[upd] = var[upd]
                best_img[upd] = imgs[better]
                best_loss[upd] = loss[better]
                best_pred[upd] = pred[better]
                best_iter[upd] = it
                if config.early_stop:
                    stopped[live[fooled]] = True
                if not need_grad:
                    break
                step_rows = ~fooled if config.early_stop else np.ones(live.size, dtype=bool)
                moving = live[step_rows]
                if moving.size == 0:
                    continue
                step = adam.step(grad[step_rows], rows=moving, sign=1.0)
                var[moving] = problem.project(var[moving] + step, rows[moving])

            success = best_pred != y[rows]
            # first success wins; otherwise keep the highest-loss restart
            take = success | (best_loss > rep_loss[rows])
            tr = rows[take]
            rep_var[tr] = best_var[take]
            rep_img[tr] = best_img[take]
            rep_loss[tr] = best_loss[take]
            rep_pred[tr] = best_pred[take]
            rep_iter[tr] = best_iter[take]
            rep_restart[tr] = restart
            done[rows[success]] = True

    return rep_var, rep_img, rep_loss, rep_pred, rep_iter, rep_restart, predicted_before, indices


def package(norm: str, x, y, outputs, perturbation_norm_of=None, extra=None) -> AttackBatch:
    var, img, loss, pred, iters, restart, before, indices = outputs
    norms = batch_norms(var, norm) if perturbation_norm_of is None else perturbation_norm_of(var, img)
    return AttackBatch(
        norm=norm,
        success=pred != np.asarray(y),
        adversarial=img,
        perturbation=var,
        iterations_used=iters,
        restart_index=restart,
        final_loss=loss,
        perturbation_norm=norms,
        labels=np.asarray(y, dtype=np.int64),
        predicted_before=np.asarray(before, dtype=np.int64),
        predicted_after=pred.astype(np.int64),
        indices=indices,
        extra=extra or {},
    )
