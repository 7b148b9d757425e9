import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from robustlab.attacks import (
    CSV_COLUMNS,
    AttackConfig,
    attack_success_rate,
    batch_norms,
    cw_attack,
    cw_objective,
    init_perturbation,
    on_manifold_attack,
    pgd_attack,
    project_ball,
    random_perturbation_baseline,
    success_rate,
    transfer_attack,
    transformation_attack,
)
from robustlab.autodiff import Classifier, Tensor, no_grad
from robustlab.autodiff.nn import Linear
from robustlab.manifold import TrueManifold, project_with_restarts


def linear_model(weight, bias):
    """Linear classifier on flat inputs; ``weight`` has one row per class."""
    weight = np.asarray(weight, dtype=np.float64)
    layer = Linear(weight.shape[1], weight.shape[0], np.random.default_rng(0))
    layer.params["weight"].data[...] = weight
    layer.params["bias"].data[...] = bias
    return Classifier([layer], (weight.shape[1],), weight.shape[0]).eval()


def permuted(model, perm):
    """Same network with output ``j`` reporting the original class ``perm[j]``."""
    last = model.layers[-1]
    clone = Linear(last.n_in, last.n_out, np.random.default_rng(0))
    clone.params["weight"].data[...] = last.params["weight"].data[perm]
    clone.params["bias"].data[...] = last.params["bias"].data[perm]
    return Classifier(model.layers[:-1] + [clone], model.input_shape, model.num_classes).eval()


class Relabeled:
    """A permuted-output model whose predictions are mapped back to the original labels."""

    def __init__(self, model, perm):
        self.model, self.perm = model, perm

    def predict(self, x):
        return self.perm[self.model.predict(x)]


class TestProjectBall:
    def test_interior_unchanged(self):
        d = np.array([[0.1, -0.2]])
        assert np.array_equal(project_ball(d, "linf", 0.3), d)
        assert np.array_equal(project_ball(d, "l2", 1.0), d)

    def test_linf_clamp(self):
        assert project_ball(np.array([[0.5, -0.7, 0.1]]), "linf", 0.3).tolist() == [[0.3, -0.3, 0.1]]

    def test_l2_radial_scaling(self):
        d = np.array([[1.8, 2.4]])  # length 3
        assert np.allclose(project_ball(d, "l2", 1.5), 0.5 * d, rtol=0, atol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(["linf", "l2"]), st.floats(0.01, 3.0))
    def test_idempotent_and_inside(self, seed, norm, eps):
        d = np.random.default_rng(seed).normal(scale=2.0, size=(4, 7))
        p = project_ball(d, norm, eps)
        assert np.all(batch_norms(p, norm) <= eps + 1e-12)
        assert np.array_equal(project_ball(p, norm, eps), p)

    def test_negative_radius(self):
        with pytest.raises(ValueError):
            project_ball(np.zeros((1, 2)), "l2", -1.0)


class TestInitPerturbation:
    @pytest.mark.parametrize("norm", ["linf", "l2"])
    def test_inside_ball(self, norm):
        rng = np.random.default_rng(0)
        draws = np.stack([init_perturbation(rng, norm, 0.3, (5,)) for _ in range(100_000)])
        assert np.all(batch_norms(draws, norm) <= 0.3 + 1e-12)

    def test_l2_radius_is_uniform(self):
        rng = np.random.default_rng(1)
        radii = np.array([np.linalg.norm(init_perturbation(rng, "l2", 1.5, (3,))) for _ in range(100_000)]) / 1.5
        assert stats.kstest(radii, "uniform").statistic < 0.01

    @pytest.mark.parametrize("norm", ["linf", "l2"])
    def test_zero_distance(self, norm):
        assert not init_perturbation(np.random.default_rng(2), norm, 0.3, (4,), u=0.0).any()


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs", [{"epsilon": -0.1}, {"iterations": 0}, {"restarts": 0}, {"norm": "l1"}, {"epsilon": float("nan")}]
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            AttackConfig(**kwargs)

    def test_defaults(self):
        c = AttackConfig()
        assert (c.norm, c.epsilon, c.iterations, c.learning_rate, c.restarts) == ("linf", 0.3, 40, 0.005, 5)
        assert (c.cw_kappa, c.cw_lambda, c.cw_iterations) == (1.5, 1.0, 120)


class TestSuccessRate:
    def test_all(self):
        assert success_rate([1, 1], [1, 1]) == 1.0

    def test_none(self):
        assert success_rate([0, 0, 0], [1, 1, 0]) == 0.0

    def test_ineligible_excluded(self):
        success = [1, 1, 1, 0, 1, 1, 0, 0, 0, 0]
        eligible = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]
        assert success_rate(success, eligible) == 0.75

    def test_undefined(self):
        assert success_rate([1], [0]) is None


@pytest.fixture(scope="module")
def pgd_batch(small_splits):
    _, test = small_splits
    return test.images[:40], test.labels[:40]


class TestPgd:
    @pytest.mark.parametrize("norm,eps", [("linf", 0.3), ("l2", 1.5)])
    def test_constraints(self, trained_small, pgd_batch, norm, eps):
        x, y = pgd_batch
        res = pgd_attack(trained_small, x, y, AttackConfig(norm=norm, epsilon=eps))
        delta = res.adversarial - x
        assert np.all(batch_norms(delta, norm) <= eps + 1e-9)
        assert res.adversarial.min() >= 0 and res.adversarial.max() <= 1
        assert np.array_equal(res.perturbation_norm, batch_norms(res.perturbation, norm))

    def test_success_implies_misclassified(self, trained_small, pgd_batch):
        x, y = pgd_batch
        res = pgd_attack(trained_small, x, y)
        assert np.array_equal(res.success, trained_small.predict(res.adversarial) != y)

    def test_early_stop_records_the_flip(self, trained_small, pgd_batch):
        x, y = pgd_batch
        res = pgd_attack(trained_small, x, y)
        hit = res.success
        assert hit.any()
        assert np.all(res.predicted_after[hit] != y[hit])
        assert np.all(res.iterations_used <= 40)

    def test_zero_radius(self, trained_small, pgd_batch):
        x, y = pgd_batch
        res = pgd_attack(trained_small, x, y, AttackConfig(epsilon=0.0, restarts=1))
        assert np.array_equal(res.adversarial, x)
        assert np.array_equal(res.success, trained_small.predict(x) != y)

    def test_deterministic(self, trained_small, pgd_batch):
        x, y = pgd_batch
        a = pgd_attack(trained_small, x, y, AttackConfig(seed=(3, 1)))
        b = pgd_attack(trained_small, x, y, AttackConfig(seed=(3, 1)))
        assert np.array_equal(a.adversarial, b.adversarial) and np.array_equal(a.final_loss, b.final_loss)

    def test_index_streams_are_order_independent(self, trained_small, pgd_batch):
        x, y = pgd_batch
        cfg = AttackConfig(early_stop=False, restarts=1, iterations=5)
        whole = pgd_attack(trained_small, x[:6], y[:6], cfg)
        part = pgd_attack(trained_small, x[3:6], y[3:6], cfg, indices=np.arange(3, 6))
        assert np.allclose(whole.adversarial[3:6], part.adversarial, atol=1e-12)

    def test_loss_does_not_decrease(self, trained_small, pgd_batch):
        x, y = pgd_batch
        cfg = AttackConfig(early_stop=False, restarts=1)
        start = pgd_attack(trained_small, x, y, cfg.with_(iterations=1))
        full = pgd_attack(trained_small, x, y, cfg)
        # same random start; the report keeps the best iterate, so the loss cannot fall
        assert np.all(full.final_loss >= start.final_loss - 1e-12)

    def test_constant_model_never_succeeds(self):
        model = linear_model(np.zeros((2, 3)), np.zeros(2))
        x = np.full((5, 3), 0.5)
        res = pgd_attack(model, x, np.zeros(5, dtype=int))
        assert not res.success.any()
        assert np.all(res.final_loss == np.log(2.0))  # the loss never moves off its starting value

    def test_linear_closed_form(self):
        w = np.array([1.0, -2.0])
        model = linear_model(np.stack([np.zeros(2), w]), np.array([0.0, -0.1]))
        x = np.array([[0.4, 0.3]])  # margin w.x - 0.1 = -0.3, class 0
        assert model.predict(x)[0] == 0
        eps = 0.2
        optimal = x + eps * np.sign(w)  # raises the class-1 logit by eps * ||w||_1 = 0.6
        assert (optimal @ w - 0.1) > 0
        res = pgd_attack(model, x, [0], AttackConfig(epsilon=eps, iterations=200, learning_rate=0.01, early_stop=False, restarts=1))
        assert res.success[0]
        assert np.allclose(res.adversarial, optimal, atol=1e-9)

    def test_budget_is_monotone(self, trained_small, small_splits):
        _, test = small_splits
        x, y = test.images[:200], test.labels[:200]
        rates = [attack_success_rate(pgd_attack(trained_small, x, y, AttackConfig(epsilon=e))) for e in (0.1, 0.2, 0.3)]
        assert rates == sorted(rates)

    def test_rejects_latent_norm(self, trained_small, pgd_batch):
        with pytest.raises(ValueError):
            pgd_attack(trained_small, *pgd_batch, AttackConfig(norm="latent-linf"))

    def test_csv(self, trained_small, pgd_batch, tmp_path):
        x, y = pgd_batch
        res = pgd_attack(trained_small, x[:5], y[:5], AttackConfig(iterations=2))
        res.to_csv(tmp_path / "a.csv")
        with open(tmp_path / "a.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 5
        assert [int(r["success"]) for r in rows] == res.success.astype(int).tolist()
        assert float(rows[2]["final_loss"]) == res.final_loss[2]


class TestCarliniWagner:
    def test_objective_example(self):
        logits = np.array([[2.0, 5.0, 0.0]])
        assert cw_objective(logits, [0], 1.5)[0] == -1.5

    def test_objective_before_success(self):
        logits = np.array([[4.0, 1.0, 3.5]])
        assert cw_objective(logits, [0], 1.5)[0] == 0.5

    def test_identity_preimage(self):
        x = np.random.default_rng(0).uniform(0.1, 0.9, size=(3, 4))
        back = (np.tanh(np.arctanh(2 * x - 1)) + 1) / 2
        assert np.allclose(back, x, atol=1e-15)

    def test_runs_and_stays_in_box(self, trained_small, small_splits):
        _, test = small_splits
        x, y = test.images[:10], test.labels[:10]
        res = cw_attack(trained_small, x, y, AttackConfig(norm="l2", epsilon=1.5, cw_iterations=30))
        assert res.adversarial.min() >= 0 and res.adversarial.max() <= 1
        assert np.allclose(res.perturbation_norm, batch_norms(res.adversarial - x, "l2"))
        assert np.array_equal(res.success, trained_small.predict(res.adversarial) != y)


@pytest.fixture(scope="module")
def pose_setup(small_splits):
    _, test = small_splits
    idx = np.arange(30)
    return TrueManifold.for_dataset(test, idx), test.images[idx], test.labels[idx]


class TestOnManifold:
    def test_latent_ball_and_box(self, trained_small, pose_setup):
        m, x, y = pose_setup
        res = on_manifold_attack(trained_small, m, x, y)
        zeta = res.extra["latent"] - m.poses
        assert np.all(np.abs(zeta).max(axis=1) <= 0.3 + 1e-9)
        assert np.all(res.extra["latent"] >= m.lower) and np.all(res.extra["latent"] <= m.upper)

    def test_image_is_decoded_latent(self, trained_small, pose_setup):
        m, x, y = pose_setup
        res = on_manifold_attack(trained_small, m, x, y, AttackConfig(norm="latent-linf", restarts=1, iterations=5))
        with no_grad():
            decoded = m.decode(Tensor(res.extra["latent"])).data
        assert np.array_equal(res.adversarial, decoded)

    def test_zero_radius_gives_reconstruction(self, trained_small, pose_setup):
        m, x, y = pose_setup
        res = on_manifold_attack(trained_small, m, x, y, AttackConfig(norm="latent-linf", epsilon=0.0, restarts=1))
        assert np.array_equal(res.adversarial, x)  # the true decoder reproduces the data exactly
        assert np.array_equal(res.success, trained_small.predict(x) != y)

    def test_successes_lie_on_the_manifold(self, trained_small, pose_setup):
        m, x, y = pose_setup
        res = on_manifold_attack(trained_small, m, x, y)
        hits = np.flatnonzero(res.success)
        assert hits.size
        proj = project_with_restarts(res.adversarial[hits], m.subset(hits), m.lower, m.upper, init=res.extra["latent"][hits], restarts=0)
        assert np.all(proj.distance < 1e-3)

    def test_needs_codes_without_encoder(self, trained_small, pose_setup):
        m, x, y = pose_setup
        with pytest.raises(ValueError):
            on_manifold_attack(trained_small, TrueManifold(m.bitmaps), x, y)


class TestTransformation:
    def test_zero_radius_is_identity(self, trained_small, small_splits):
        _, test = small_splits
        x, y = test.images[:10], test.labels[:10]
        res = transformation_attack(trained_small, x, y, AttackConfig(norm="transform-linf", epsilon=0.0, restarts=1))
        assert np.allclose(res.adversarial, x, atol=1e-12)

    def test_box(self, trained_small, small_splits):
        _, test = small_splits
        res = transformation_attack(trained_small, test.images[:20], test.labels[:20])
        assert np.all(np.abs(res.perturbation).max(axis=1) <= 0.3 + 1e-12)

    def test_beats_random_transforms(self, trained_medium, medium_splits):
        _, test = medium_splits
        x, y = test.images[:500], test.labels[:500]
        cfg = AttackConfig(norm="transform-linf", epsilon=0.3)
        attacked = attack_success_rate(transformation_attack(trained_medium, x, y, cfg))
        baseline = attack_success_rate(random_perturbation_baseline(trained_medium, x, y, "transform", cfg))
        assert attacked > baseline


class TestRandomBaseline:
    def test_zero_radius_never_flips(self, trained_small, small_splits):
        _, test = small_splits
        res = random_perturbation_baseline(trained_small, test.images[:20], test.labels[:20], config=AttackConfig(epsilon=0.0))
        ok = res.predicted_before == res.labels
        assert not res.success[ok].any()

    def test_inside_ball(self, trained_small, small_splits):
        _, test = small_splits
        res = random_perturbation_baseline(trained_small, test.images[:20], test.labels[:20], config=AttackConfig(norm="l2", epsilon=1.5))
        assert np.all(batch_norms(res.adversarial - test.images[:20], "l2") <= 1.5 + 1e-9)

    def test_dominated_by_pgd(self, trained_medium, medium_splits):
        _, test = medium_splits
        x, y = test.images[:500], test.labels[:500]
        random_rate = attack_success_rate(random_perturbation_baseline(trained_medium, x, y))
        assert random_rate <= attack_success_rate(pgd_attack(trained_medium, x, y))

    def test_unknown_space(self, trained_small):
        with pytest.raises(ValueError):
            random_perturbation_baseline(trained_small, np.zeros((1, 1, 28, 28)), [0], "pixels")

    def test_latent_needs_manifold(self, trained_small):
        with pytest.raises(ValueError):
            random_perturbation_baseline(trained_small, np.zeros((1, 1, 28, 28)), [0], "latent")


@pytest.fixture(scope="module")
def transfer_data(small_splits):
    _, test = small_splits
    return test.images[:60], test.labels[:60]


class TestTransfer:
    def test_self_transfer_equals_white_box(self, trained_small, transfer_data):
        x, y = transfer_data
        cfg = AttackConfig(iterations=10)
        out = transfer_attack(trained_small, trained_small, x, y, cfg)
        assert out["success_rate"] == attack_success_rate(pgd_attack(trained_small, x, y, cfg))

    def test_class_permutation(self, trained_small, transfer_data):
        x, y = transfer_data
        perm = np.random.default_rng(0).permutation(10)
        target = Relabeled(permuted(trained_small, perm), perm)
        assert np.array_equal(target.predict(x), trained_small.predict(x))
        cfg = AttackConfig(iterations=10)
        a = transfer_attack(trained_small, trained_small, x, y, cfg)
        b = transfer_attack(trained_small, target, x, y, cfg)
        assert b["success_rate"] == a["success_rate"]

    def test_denominator_is_joint_correct_set(self, trained_small, transfer_data):
        from robustlab.autodiff import build_architecture

        x, y = transfer_data
        target = build_architecture("conv_small", seed=11)
        out = transfer_attack(trained_small, target, x, y, AttackConfig(iterations=5))
        joint = (trained_small.predict(x) == y) & (target.predict(x) == y)
        assert out["eligible"] == joint.sum()
        assert out["successes"] == (out["target_success"] & joint).sum()

    def test_empty_joint_set(self, trained_small, transfer_data):
        x, y = transfer_data
        wrong = (trained_small.predict(x) + 1) % 10
        with pytest.raises(ValueError):
            transfer_attack(trained_small, trained_small, x, wrong)

