"""End-to-end acceptance checks.

Each test prints a PASS/FAIL line in the "acceptance criteria" section of the
terminal summary. The training grids run through the harness and reuse its
model cache under ``runs/acceptance`` (override with ROBUSTLAB_ACCEPTANCE_DIR),
so a repeated session only re-runs the attacks.
"""

import math
import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import scipy.linalg
import scipy.stats

from conftest import ACCEPTANCE
from oracles import numeric_grad, rel_error, scalar
from robustlab.attacks import AttackConfig, pgd_attack
from robustlab.autodiff import Tensor, build_architecture, cross_entropy, no_grad
from robustlab.harness import load_config, run
from robustlab.manifold import project_knn
from robustlab.manifold.projection import least_squares, nearest_neighbors
from robustlab.manifold.vaegan import kl_to_standard_normal
from robustlab.toy import TsiprasToy, point_mass_validity, tsipras_posteriors

REPO = Path(__file__).resolve().parents[1]
CONFIGS = REPO / "configs"
RUNS = Path(os.environ.get("ROBUSTLAB_ACCEPTANCE_DIR", REPO / "runs" / "acceptance"))


@pytest.fixture
def criterion(request):
    """Context manager factory that records a PASS/FAIL line for one criterion."""

    @contextmanager
    def record(number: int, title: str):
        info = {"detail": ""}
        start = time.perf_counter()
        passed = False
        try:
            yield info
            passed = True
        finally:
            elapsed = time.perf_counter() - start
            status = "PASS" if passed else "FAIL"
            line = f"[{status}] criterion {number:2d}: {title} ({info['detail']}; {elapsed:.1f}s)"
            request.config.stash[ACCEPTANCE].append((number, line))

    return record


def grid_run(name: str) -> dict:
    cfg = load_config(CONFIGS / f"acceptance_{name}.yaml")
    start = time.perf_counter()
    result = run(cfg, workers=1, output_dir=RUNS / name, log=lambda *_: None)
    result["seconds"] = time.perf_counter() - start
    assert not result["manifest"]["failed"], result["manifest"]["failed"]
    return result


@pytest.fixture(scope="module")
def sweep():
    return grid_run("sweep")


@pytest.fixture(scope="module")
def variants():
    return grid_run("training")


def seed_mean(records, mode, n, value):
    picked = [value(r) for r in records if r["mode"] == mode and r["N"] == n]
    assert picked, (mode, n)
    return float(np.mean(picked))


def attack_rate(name):
    return lambda r: r["attacks"][name]["success_rate"]


def test_gradients_match_finite_differences(criterion):
    rng = np.random.default_rng(2024)
    with criterion(1, "gradients match central differences on 100 random models") as info:
        start = time.perf_counter()
        worst = 0.0
        for _ in range(100):
            model, x = random_small_model(rng)
            y = rng.integers(0, model.num_classes, len(x))
            worst = max(worst, model_gradient_error(model, x, y))
        seconds = time.perf_counter() - start
        info["detail"] = f"worst relative error {worst:.2e}"
        assert worst < 1e-4 and seconds < 60


def random_small_model(rng):
    k = int(rng.integers(2, 5))
    batch = int(rng.integers(2, 5))
    if rng.uniform() < 0.5:
        n_in, hidden = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        layers = [{"kind": "linear", "in": n_in, "out": hidden}, {"kind": "relu"}]
        if rng.uniform() < 0.5:
            layers.append({"kind": "batchnorm", "channels": hidden})
        layers.append({"kind": "linear", "in": hidden, "out": k})
        shape = (n_in,)
    else:
        c, size, out = int(rng.integers(1, 3)), int(rng.integers(4, 7)), int(rng.integers(1, 4))
        kernel, stride = int(rng.integers(2, 4)), int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        side = (size + 2 * padding - kernel) // stride + 1
        layers = [{"kind": "conv2d", "in": c, "out": out, "kernel": kernel, "stride": stride, "padding": padding}]
        if rng.uniform() < 0.5:
            layers.append({"kind": "batchnorm", "channels": out})
        layers += [{"kind": "relu"}, {"kind": "flatten"}, {"kind": "linear", "in": out * side * side, "out": k}]
        shape = (c, size, size)
    model = build_architecture("custom", shape, k, seed=int(rng.integers(1 << 30)), layers=layers)
    return model, rng.normal(size=(batch, *shape))


def model_gradient_error(model, x, y) -> float:
    """Relative error over the concatenation of all input and parameter gradients.

    Per-tensor ratios are meaningless for gradients that vanish exactly, such as
    a bias feeding batch normalisation, where only finite-difference noise remains.
    """
    params = model.named_parameters()
    xt = Tensor(x, requires_grad=True)
    model.zero_grad()
    cross_entropy(model(xt), y).backward()
    analytic = [xt.grad.ravel()] + [p.grad.ravel().copy() for p in params.values()]
    numeric = [numeric_grad(lambda v: scalar(cross_entropy(model(Tensor(v)), y)), x).ravel()]
    for p in params.values():
        original = p.data.copy()

        def loss_at(v, p=p):
            p.data = v
            with no_grad():
                return scalar(cross_entropy(model(Tensor(x)), y))

        numeric.append(numeric_grad(loss_at, original).ravel())
        p.data = original
    return rel_error(np.concatenate(analytic), np.concatenate(numeric))


def test_attack_constraints(criterion, trained_medium, medium_splits):
    _, test = medium_splits
    x, y = test.images[:500], test.labels[:500]
    with criterion(2, "1000 PGD perturbations stay in their balls and in [0, 1]") as info:
        start = time.perf_counter()
        excess = {}
        in_box = True
        # half of each norm at a large step size
        for norm, eps in (("linf", 0.3), ("l2", 1.5)):
            excess[norm] = -np.inf
            for lr, rows in ((0.005, slice(0, 250)), (0.2, slice(250, 500))):
                config = AttackConfig(norm=norm, epsilon=eps, iterations=20, learning_rate=lr, restarts=1, early_stop=False, seed=11)
                batch = pgd_attack(trained_medium, x[rows], y[rows], config)
                delta = batch.image_perturbation.reshape(len(batch.adversarial), -1)
                size = np.abs(delta).max(axis=1) if norm == "linf" else np.sqrt((delta * delta).sum(axis=1))
                excess[norm] = max(excess[norm], float((size - eps).max()))
                in_box &= bool(np.all((batch.adversarial >= 0) & (batch.adversarial <= 1)))
        seconds = time.perf_counter() - start
        info["detail"] = f"max excess linf {excess['linf']:.1e}, l2 {excess['l2']:.1e}"
        assert max(excess.values()) <= 1e-9 and in_box and seconds < 300


def test_regular_adversarials_leave_the_manifold(criterion, sweep):
    summary = next(r for r in sweep["records"] if r["N"] == 4000 and r["seed"] == 0)
    regular, on_manifold = summary["projection"]["pgd_linf"], summary["projection"]["on_manifold"]
    with criterion(3, "regular adversarials sit about one perturbation norm off the manifold") as info:
        ratio = regular["median_distance_ratio"]
        separation = regular["median_decoder_distance"] / on_manifold["median_decoder_distance"]
        info["detail"] = f"median ratio {ratio:.3f} over {regular['projected']} attacks, median distance ratio regular/on-manifold {separation:.1f}"
        assert regular["projected"] == 200
        assert 0.7 <= ratio <= 1.1
        assert separation > 5


def test_on_manifold_robustness_tracks_generalization(criterion, sweep):
    records = sweep["records"]
    sizes = sorted({r["N"] for r in records})
    with criterion(4, "on-manifold success falls with N and ranks with test error") as info:
        means = [seed_mean(records, "normal", n, attack_rate("on_manifold")) for n in sizes]
        rho = scipy.stats.spearmanr([r["test_error"] for r in records], [r["attacks"]["on_manifold"]["success_rate"] for r in records])[0]
        info["detail"] = "seed means " + ", ".join(f"N={n}: {m:.3f}" for n, m in zip(sizes, means)) + f"; spearman {rho:.3f}"
        assert all(b < a for a, b in zip(means, means[1:]))
        assert rho >= 0.8
        assert sweep["seconds"] < 2 * 3600


def test_regular_robustness_ignores_generalization(criterion, sweep):
    records = sweep["records"]
    sizes = sorted({r["N"] for r in records})
    with criterion(5, "PGD success stays flat while test error changes") as info:
        pgd = [seed_mean(records, "normal", n, attack_rate("pgd_linf")) for n in sizes]
        err = [seed_mean(records, "normal", n, lambda r: r["test_error"]) for n in sizes]
        info["detail"] = f"PGD success spread {max(pgd) - min(pgd):.3f}, test error spread {max(err) - min(err):.3f}"
        assert max(pgd) - min(pgd) < 0.10
        assert max(err) - min(err) > 0.10


def test_on_manifold_training_generalizes_better(criterion, sweep, variants):
    with criterion(6, "on-manifold and transformation training beat normal test error") as info:
        err = {"normal": seed_mean(sweep["records"], "normal", 1000, lambda r: r["test_error"])}
        for mode in ("on_manifold", "adv_transform", "random_transform"):
            err[mode] = seed_mean(variants["records"], mode, 1000, lambda r: r["test_error"])
        info["detail"] = ", ".join(f"{k} {v:.4f}" for k, v in err.items())
        assert err["on_manifold"] < err["normal"]
        assert err["adv_transform"] < err["normal"]
        assert err["random_transform"] >= err["adv_transform"]
        assert variants["seconds"] < 2 * 3600


def test_adversarial_training_lowers_pgd_success(criterion, sweep, variants):
    with criterion(7, "half-adversarial training cuts PGD success by 30 points") as info:
        normal = seed_mean(sweep["records"], "normal", 1000, attack_rate("pgd_linf"))
        adv = seed_mean(variants["records"], "adv_half", 1000, attack_rate("pgd_linf"))
        info["detail"] = f"normal {normal:.3f}, adv_half {adv:.3f}, gap {normal - adv:.3f}"
        assert normal - adv >= 0.30


def test_toy_posteriors(criterion):
    with criterion(8, "toy posteriors match closed forms") as info:
        start = time.perf_counter()
        pos, _ = tsipras_posteriors(-1, -3.0, TsiprasToy(p=0.9, eta=3.0))
        expected = 0.1 * math.exp(-18) / (0.1 * math.exp(-18) + 0.9)
        verdict = point_mass_validity(0.5, 0.5, label=1)
        info["detail"] = f"relative error {abs(pos - expected) / expected:.1e}, point-mass posterior {verdict.posterior_pos}"
        assert abs(pos - expected) <= 1e-12 * expected
        assert verdict.posterior_pos == 0.0
        assert time.perf_counter() - start < 1


def test_projection_algebra(criterion, medium_splits):
    train_set, test = medium_splits
    rng = np.random.default_rng(9)
    with criterion(9, "1000 k-NN projections obey Pythagoras and orthogonality") as info:
        start = time.perf_counter()
        worst = {"pythagoras": 0.0, "orthogonality": 0.0, "oracle": 0.0}
        for _ in range(1000):
            X, delta = knn_instance(rng, train_set.images, test.images)
            beta = least_squares(X, delta)
            fit = X @ beta
            r = delta - fit
            scale = delta @ delta
            worst["pythagoras"] = max(worst["pythagoras"], abs(scale - fit @ fit - r @ r) / max(scale, 1e-300))
            bound = 1e-8 * np.linalg.norm(X, 2) * np.sqrt(scale)
            worst["orthogonality"] = max(worst["orthogonality"], np.linalg.norm(X.T @ r) / bound)
            oracle = scipy.linalg.solve(X.T @ X, X.T @ delta, assume_a="pos")
            worst["oracle"] = max(worst["oracle"], float(np.abs(beta - oracle).max() / max(1.0, np.abs(oracle).max())))
        seconds = time.perf_counter() - start
        info["detail"] = f"pythagoras {worst['pythagoras']:.1e}, orthogonality/bound {worst['orthogonality']:.1e}, oracle gap {worst['oracle']:.1e}"
        assert worst["pythagoras"] <= 1e-9
        assert worst["orthogonality"] <= 1.0
        assert worst["oracle"] <= 1e-6
        assert seconds < 60


def knn_instance(rng, pool, queries):
    """Neighbour differences and a perturbation, built the way project_knn builds them."""
    k = int(rng.integers(2, 31))
    clean = queries[rng.integers(len(queries))]
    adversarial = np.clip(clean + rng.uniform(-0.3, 0.3, clean.shape), 0, 1)
    neighbors = pool[nearest_neighbors(adversarial, pool, k)].reshape(k, -1)
    base = clean.reshape(-1) if rng.uniform() < 0.5 else neighbors.mean(axis=0)
    X = (neighbors - base).T
    if k > 1 and np.array_equal(base, neighbors.mean(axis=0)):
        X = X[:, :-1]  # mean-centred columns sum to zero; drop one to keep full rank for the oracle
    return X, (adversarial - clean).reshape(-1)


def test_knn_projection_matches_direct_algebra(medium_splits):
    train_set, test = medium_splits
    res = project_knn(test.images[:3] * 0.9, test.images[:3], train_set.images, k=5)
    for i in range(3):
        X = (train_set.images[nearest_neighbors(test.images[i] * 0.9, train_set.images, 5)].reshape(5, -1) - test.images[i].reshape(-1)).T
        delta = (-0.1 * test.images[i]).reshape(-1)
        beta = least_squares(X, delta)
        assert res.distance[i] == pytest.approx(np.linalg.norm(delta - X @ beta), rel=1e-9)


def test_kl_divergence(criterion):
    rng = np.random.default_rng(10)
    with criterion(10, "analytic KL agrees with Monte Carlo on 100 posteriors") as info:
        start = time.perf_counter()
        worst = 0.0
        n = 200_000
        for _ in range(100):
            dim = int(rng.integers(1, 9))
            mu, log_var = rng.normal(size=dim), rng.uniform(-2.0, 1.0, size=dim)
            z = mu + np.exp(0.5 * log_var) * rng.standard_normal((n, dim))
            log_q = -0.5 * (((z - mu) ** 2) / np.exp(log_var) + log_var).sum(axis=1)
            log_p = -0.5 * (z * z).sum(axis=1)
            samples = log_q - log_p
            se = samples.std(ddof=1) / math.sqrt(n)
            worst = max(worst, abs(float(kl_to_standard_normal(mu, log_var)) - samples.mean()) / se)
        zero = kl_to_standard_normal(np.zeros((1, 4)), np.zeros((1, 4)))[0]
        seconds = time.perf_counter() - start
        info["detail"] = f"worst gap {worst:.2f} standard errors, KL at the prior {zero}"
        assert worst <= 3.0
        assert zero == 0.0
        assert seconds < 60


def test_smoke_rerun_is_byte_identical(criterion, tmp_path_factory):
    cfg = load_config(CONFIGS / "smoke.yaml")
    with criterion(11, "smoke config re-run gives byte-identical CSVs") as info:
        start = time.perf_counter()
        outs = [tmp_path_factory.mktemp(f"smoke{i}") for i in range(2)]
        for out in outs:
            result = run(cfg, workers=1, output_dir=out, log=lambda *_: None)
            assert not result["manifest"]["failed"]
        files = [{p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*.csv"))} for out in outs]
        differing = sorted(k for k in files[0] if files[0][k] != files[1].get(k))
        info["detail"] = f"{len(files[0])} CSV files, {len(differing)} differ"
        assert files[0] and set(files[0]) == set(files[1]) and not differing
        assert time.perf_counter() - start < 1800
