import numpy as np
import pytest

from attacks_whitebox import (GradOracle, StrengthRecorder, bim, cw, deepfool, dim, fgsm, mim, wrap_bpda,
                              wrap_eot)
from defenses import DefendedModel
from errors import InvalidInputError
from input_transforms import BitDepthReduction
from tensor_core import linear_classifier, loss_margin
from threat import Goal, Norm, ThreatSpec, dist, is_feasible

X = np.array([0.6, 0.45])


def linf(eps, goal=Goal.UNTARGETED):
    return ThreatSpec(Norm.LINF, goal, eps)


def l2(eps=1.0, goal=Goal.UNTARGETED):
    return ThreatSpec(Norm.L2, goal, eps)


class RecordingOracle(GradOracle):
    """Keeps every input the attack asks a gradient for."""

    def __init__(self, model):
        super().__init__(model)
        self.seen = []

    def loss_grad(self, x, label, loss_kind="xent"):
        self.seen.append(np.array(x, dtype=float))
        return super().loss_grad(x, label, loss_kind)



class TestFgsm:

    def test_zero_budget_returns_input(self, diagonal_model):
        outcome = fgsm(diagonal_model, X, linf(0.0), 1)
        np.testing.assert_array_equal(outcome.x_adv, X)
        assert not outcome.success
        assert outcome.pert_norm == 0.0

    def test_linf_step_lowers_margin_by_eps_times_l1_norm(self, diagonal_model):
        outcome = fgsm(diagonal_model, X, linf(0.05), 1)
        np.testing.assert_allclose(outcome.x_adv, [0.55, 0.5])
        drop = loss_margin(diagonal_model, X, 1) - loss_margin(diagonal_model, outcome.x_adv, 1)
        assert drop == pytest.approx(0.05 * 2.0)
        assert not outcome.success
        assert outcome.iterations_used == 1

    def test_large_enough_budget_flips_prediction(self, diagonal_model):
        assert fgsm(diagonal_model, X, linf(0.1), 1).success

    def test_targeted_moves_towards_target(self, diagonal_model):
        outcome = fgsm(diagonal_model, X, linf(0.1, Goal.TARGETED), 0)
        assert outcome.success
        np.testing.assert_allclose(outcome.x_adv, [0.5, 0.55])

    def test_l2_step_has_budget_length(self, diagonal_model):
        outcome = fgsm(diagonal_model, X, l2(0.05), 1)
        assert outcome.pert_norm == pytest.approx(0.05)

    @pytest.mark.parametrize("loss_kind", ["xent", "margin"])
    def test_loss_kinds_agree_on_direction(self, diagonal_model, loss_kind):
        np.testing.assert_allclose(fgsm(diagonal_model, X, linf(0.05), 1, loss_kind).x_adv, [0.55, 0.5])


class TestIterative:

    def test_single_bim_step_is_fgsm(self, trained_mlp, gaussian_split):
        _, evaluation = gaussian_split
        spec = linf(0.08)
        for ex in evaluation.examples[:10]:
            np.testing.assert_array_equal(bim(trained_mlp, ex.x, spec, ex.y, iters=1, alpha=0.08).x_adv,
                                          fgsm(trained_mlp, ex.x, spec, ex.y).x_adv)

    @pytest.mark.parametrize("norm", [Norm.LINF, Norm.L2])
    def test_mim_without_momentum_is_bim(self, trained_mlp, gaussian_split, norm):
        _, evaluation = gaussian_split
        spec = ThreatSpec(norm, eps=0.1)
        for ex in evaluation.examples[:10]:
            np.testing.assert_allclose(mim(trained_mlp, ex.x, spec, ex.y, iters=6, mu=0.0).x_adv,
                                       bim(trained_mlp, ex.x, spec, ex.y, iters=6).x_adv, atol=1e-12)

    @pytest.mark.parametrize("attack", [bim, mim])
    @pytest.mark.parametrize("norm", [Norm.LINF, Norm.L2])
    def test_iterates_stay_feasible(self, trained_mlp, gaussian_split, attack, norm):
        _, evaluation = gaussian_split
        spec = ThreatSpec(norm, eps=0.07)
        for ex in evaluation.examples[:10]:
            outcome = attack(trained_mlp, ex.x, spec, ex.y, iters=10, alpha=0.05)
            assert is_feasible(outcome.x_adv, ex.x, spec)

    def test_checkpoints_match_shorter_runs(self, trained_mlp, gaussian_split):
        _, evaluation = gaussian_split
        ex = evaluation[0]
        spec = linf(0.1)
        long_run = bim(trained_mlp, ex.x, spec, ex.y, iters=5, checkpoints=[2, 5])
        assert sorted(long_run.snapshots) == [2, 5]
        np.testing.assert_array_equal(long_run.snapshots[2], bim(trained_mlp, ex.x, spec, ex.y, iters=2).x_adv)
        np.testing.assert_array_equal(long_run.snapshots[5], long_run.x_adv)

    def test_needs_an_iteration(self, diagonal_model):
        with pytest.raises(InvalidInputError):
            bim(diagonal_model, X, linf(0.1), 1, iters=0)


class TestDim:

    @pytest.fixture
    def image_model(self, rng):
        return linear_classifier(rng.normal(size=(2, 16)), [0.0, 0.0], input_shape=(1, 4, 4))

    def test_without_transform_is_mim(self, image_model, rng):
        x = rng.uniform(size=(1, 4, 4))
        y = image_model.predict_label(x)
        spec = linf(0.05)
        np.testing.assert_array_equal(dim(image_model, x, spec, y, iters=5, transform_prob=0.0, seed=3).x_adv,
                                      mim(image_model, x, spec, y, iters=5).x_adv)

    def test_transformed_run_is_seeded(self, image_model, rng):
        x = rng.uniform(size=(1, 4, 4))
        y = image_model.predict_label(x)
        first = dim(image_model, x, linf(0.05), y, iters=5, transform_prob=1.0, min_ratio=0.5, seed=2)
        second = dim(image_model, x, linf(0.05), y, iters=5, transform_prob=1.0, min_ratio=0.5, seed=2)
        assert first.x_adv.tobytes() == second.x_adv.tobytes()
        assert is_feasible(first.x_adv, x, linf(0.05))

    def test_vector_input_rejected(self, diagonal_model):
        with pytest.raises(InvalidInputError):
            dim(diagonal_model, X, linf(0.1), 1)


class TestDeepFool:

    def test_l2_step_on_linear_model(self, diagonal_model):
        outcome = deepfool(diagonal_model, X, l2(), 1, overshoot=0.02)
        assert outcome.success
        assert outcome.iterations_used == 1
        assert outcome.pert_norm == pytest.approx(0.15 / np.sqrt(2) * 1.02)
        assert outcome.eps_star == outcome.pert_norm

    def test_linf_step_on_linear_model(self, diagonal_model):
        outcome = deepfool(diagonal_model, X, linf(1.0), 1, overshoot=0.02)
        assert outcome.success
        assert outcome.pert_norm == pytest.approx(0.15 / 2 * 1.02)

    def test_misclassified_input_needs_nothing(self, diagonal_model):
        outcome = deepfool(diagonal_model, [0.3, 0.7], l2(), 1)
        assert outcome.success
        assert outcome.pert_norm == 0.0
        assert outcome.eps_star == 0.0

    def test_flat_model_fails(self):
        flat = linear_classifier(np.zeros((2, 2)), [1.0, 0.0])
        outcome = deepfool(flat, X, l2(), 0)
        assert not outcome.success
        assert outcome.eps_star is None

    def test_targeted_rejected(self, diagonal_model):
        with pytest.raises(InvalidInputError):
            deepfool(diagonal_model, X, l2(goal=Goal.TARGETED), 0)


class TestCw:

    def test_close_to_closed_form_minimum(self, diagonal_model):
        outcome = cw(diagonal_model, X, l2(), 1, opt_iters=300, initial_c=1.0)
        minimum = 0.15 / np.sqrt(2)
        assert outcome.success
        assert minimum - 1e-9 <= outcome.eps_star <= 1.05 * minimum
        assert outcome.eps_star == dist(outcome.x_adv, X, Norm.L2)

    def test_targeted_binary_matches_untargeted_success(self, diagonal_model):
        outcome = cw(diagonal_model, X, l2(goal=Goal.TARGETED), 0, opt_iters=300, initial_c=1.0)
        assert outcome.success
        assert diagonal_model.predict_label(outcome.x_adv) == 0

    def test_already_successful(self, diagonal_model):
        outcome = cw(diagonal_model, [0.3, 0.7], l2(), 1)
        assert outcome.success and outcome.eps_star == 0.0

    def test_stays_in_box(self, trained_mlp, gaussian_split):
        _, evaluation = gaussian_split
        for ex in evaluation.examples[:3]:
            outcome = cw(trained_mlp, ex.x, l2(), ex.y, opt_iters=50, c_search_steps=3)
            assert outcome.x_adv.min() >= 0.0 and outcome.x_adv.max() <= 1.0

    def test_linf_rejected(self, diagonal_model):
        with pytest.raises(InvalidInputError):
            cw(diagonal_model, X, linf(0.1), 1)

    def test_unknown_optimizer(self, diagonal_model):
        with pytest.raises(InvalidInputError):
            cw(diagonal_model, X, l2(), 1, optimizer="lbfgs")

    def test_default_takes_plain_gradient_steps(self, diagonal_model):
        oracle = RecordingOracle(diagonal_model)
        cw(oracle, X, l2(), 1, opt_iters=2, c_search_steps=1)
        first, second = oracle.seen
        np.testing.assert_allclose(first, X, atol=1e-12)

        w = np.arctanh(2.0 * X - 1.0)
        grad_x = 1e-2 * np.array([1.0, -1.0])
        w = w - 0.01 * grad_x * (1.0 - np.tanh(w) ** 2) / 2.0
        np.testing.assert_allclose(second, (np.tanh(w) + 1.0) / 2.0, atol=1e-12)

    def test_adam_is_opt_in(self, diagonal_model):
        oracle = RecordingOracle(diagonal_model)
        cw(oracle, X, l2(), 1, opt_iters=2, c_search_steps=1, optimizer="adam")
        step = np.arctanh(2.0 * oracle.seen[1] - 1.0) - np.arctanh(2.0 * X - 1.0)
        np.testing.assert_allclose(step, [-0.01, 0.01], rtol=1e-4)



class TestOracles:

    @pytest.fixture
    def quantized(self, diagonal_model):
        return DefendedModel((diagonal_model,), (BitDepthReduction(2),))

    def test_naive_oracle_sees_no_gradient(self, quantized):
        _, grad = GradOracle(quantized).loss_grad(X, 1)
        assert np.all(grad == 0.0)
        assert not fgsm(GradOracle(quantized), X, linf(0.2), 1).success

    def test_bpda_recovers_a_useful_gradient(self, quantized):
        _, grad = wrap_bpda(quantized).loss_grad(X, 1)
        assert grad[0] < 0 < grad[1]
        assert fgsm(wrap_bpda(quantized), X, linf(0.2), 1).success

    def test_eot_on_deterministic_model_uses_one_draw(self, diagonal_model):
        assert wrap_eot(diagonal_model, 10, seed=0).k_samples == 1

    def test_eot_is_seeded(self, diagonal_model):
        noisy = DefendedModel((diagonal_model,), noise_sigma=0.2, noise_samples=3)
        first = wrap_eot(noisy, 8, seed=4).loss_grad(X, 1)
        second = wrap_eot(noisy, 8, seed=4).loss_grad(X, 1)
        assert first[0] == second[0]
        np.testing.assert_array_equal(first[1], second[1])

    def test_needs_a_draw(self, diagonal_model):
        with pytest.raises(InvalidInputError):
            GradOracle(diagonal_model, k_samples=0)


class TestStrengthRecorder:

    def test_keeps_iterate_at_each_checkpoint(self):
        recorder = StrengthRecorder([1, 3], np.zeros(1))
        for t in (1, 2, 3):
            recorder.record(t, np.full(1, float(t)))
        snapshots = recorder.finish()
        assert {k: v[0] for k, v in snapshots.items()} == {1: 1.0, 3: 3.0}

    def test_checkpoint_zero_is_start(self):
        recorder = StrengthRecorder([0, 10], np.full(1, 7.0))
        recorder.record(1, np.ones(1))
        snapshots = recorder.finish()
        assert snapshots[0][0] == 7.0
        assert snapshots[10][0] == 1.0

    def test_inactive_without_checkpoints(self):
        recorder = StrengthRecorder(None, np.zeros(1))
        recorder.record(1, np.ones(1))
        assert recorder.finish() is None
