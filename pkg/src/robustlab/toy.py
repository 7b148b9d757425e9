"""Closed-form checks of label invariance on two small binary distributions.

Labels are ``+1`` and ``-1`` with equal prior. A perturbed input is a valid
adversarial example only if the true posterior still favours the original
label.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit


@dataclass(frozen=True)
class PointMassVerdict:
    posterior_pos: float | None  # p(y=+1 | x)
    posterior_neg: float | None  # p(y=-1 | x)
    defined: bool
    valid: bool | None  # label-invariant for the claimed label


def point_mass_validity(x_tilde: float, epsilon: float, label: int = 1) -> PointMassVerdict:
    """Check a candidate for the two-point distribution (+1 at 0, -1 at epsilon).

    Off the support the posterior is undefined and so is the verdict.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if label not in (1, -1):
        raise ValueError("label must be +1 or -1")
    if x_tilde == 0.0:
        pos, neg = 1.0, 0.0
    elif x_tilde == epsilon:
        pos, neg = 0.0, 1.0
    else:
        return PointMassVerdict(None, None, False, None)
    mine, other = (pos, neg) if label == 1 else (neg, pos)
    return PointMassVerdict(pos, neg, True, mine > other)


@dataclass(frozen=True)
class TsiprasToy:
    """``x1`` equals the label with probability ``p``; ``x2..xD ~ N(y * eta, 1)``."""

    p: float = 0.9
    eta: float = 3.0
    dim: int = 2

    def __post_init__(self):
        if not 0.5 <= self.p <= 1.0:
            raise ValueError("p must lie in [0.5, 1]")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.dim < 2:
            raise ValueError("dim must be at least 2")


def _log_likelihoods(x1: int, rest: np.ndarray, toy: TsiprasToy) -> tuple[float, float]:
    with np.errstate(divide="ignore"):
        log_p, log_q = np.log(toy.p), np.log1p(-toy.p)
    ll_pos = (log_p if x1 == 1 else log_q) - 0.5 * float(np.sum((rest - toy.eta) ** 2))
    ll_neg = (log_p if x1 == -1 else log_q) - 0.5 * float(np.sum((rest + toy.eta) ** 2))
    return ll_pos, ll_neg


def tsipras_posteriors(x1: int, x2, toy: TsiprasToy) -> tuple[float, float]:
    """``(p(y=+1 | x), p(y=-1 | x))`` computed from log-likelihoods.

    ``x2`` is a scalar or the ``dim - 1`` Gaussian coordinates.
    """
    if x1 not in (1, -1):
        raise ValueError("x1 must be +1 or -1")
    rest = np.atleast_1d(np.asarray(x2, dtype=np.float64))
    if rest.size == 1 and toy.dim > 2:
        rest = np.full(toy.dim - 1, rest[0])
    if rest.size != toy.dim - 1:
        raise ValueError(f"expected {toy.dim - 1} Gaussian coordinates, got {rest.size}")
    ll_pos, ll_neg = _log_likelihoods(x1, rest, toy)
    if np.isneginf(ll_pos) and np.isneginf(ll_neg):
        raise ValueError("the point has zero probability under both labels")
    # the logistic of the log-odds keeps full relative precision in both tails
    log_odds = ll_pos - ll_neg
    return float(expit(log_odds)), float(expit(-log_odds))


def tsipras_posteriors_direct(x1: int, x2: float, toy: TsiprasToy) -> tuple[float, float]:
    """Direct density evaluation (no logs); only for moderate inputs."""
    gauss = lambda v, m: np.exp(-0.5 * (v - m) ** 2) / np.sqrt(2 * np.pi)  # noqa: E731
    pos = 0.5 * (toy.p if x1 == 1 else 1 - toy.p) * gauss(x2, toy.eta)
    neg = 0.5 * (toy.p if x1 == -1 else 1 - toy.p) * gauss(x2, -toy.eta)
    return pos / (pos + neg), neg / (pos + neg)


REPORT_COLUMNS = ("x1", "x2", "label", "shift", "x2_perturbed", "posterior_pos", "posterior_neg", "label_invariant")


def defense_of_definition_report(toy: TsiprasToy, shifts, path=None) -> list[dict]:
    """Does moving ``x2`` towards the other class keep the true label?

    The representative points are the class-conditional modes
    ``(x1, y * eta)`` for both labels and both values of ``x1``. Each is
    shifted by ``-y * shift`` and the posterior of the result is tabulated.
    """
    rows = []
    for label in (1, -1):
        for x1 in (label, -label):
            x2 = label * toy.eta
            for shift in shifts:
                moved = x2 - label * float(shift)
                pos, neg = tsipras_posteriors(x1, moved, toy)
                mine, other = (pos, neg) if label == 1 else (neg, pos)
                rows.append(
                    {
                        "x1": x1,
                        "x2": x2,
                        "label": label,
                        "shift": float(shift),
                        "x2_perturbed": moved,
                        "posterior_pos": pos,
                        "posterior_neg": neg,
                        "label_invariant": bool(mine > other),
                    }
                )
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return rows
