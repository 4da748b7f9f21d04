import numpy as np
import pytest
from scipy.special import softmax

from defenses import (DefendedModel, DefenseSpec, adversarial_train, as_defended, build_defense, ensemble_mean,
                      identity_substitute, noise_ensemble_forward, pgd_examples)
from errors import ConfigError, InvalidInputError
from input_transforms import BitDepthReduction
from tensor_core import forward, linear_classifier
from threat import Norm, ThreatSpec, dist
from trainer import natural_train


def constant_model(logits):
    logits = np.asarray(logits, dtype=np.float64)
    return linear_classifier(np.zeros((len(logits), 2)), logits)


class TestDefendedModel:

    def test_plain_wrapper_matches_member(self, trained_mlp, rng):
        batch = rng.uniform(size=(5, 2))
        defended = as_defended(trained_mlp)
        np.testing.assert_allclose(defended.log_probabilities(batch), trained_mlp.log_probabilities(batch))
        assert not defended.is_random

    def test_mismatched_classes(self):
        with pytest.raises(ConfigError):
            DefendedModel((constant_model([0, 0]), constant_model([0, 0, 0])))

    def test_randomized_defense_needs_generator(self, diagonal_model):
        defended = DefendedModel((diagonal_model,), noise_sigma=0.1, noise_samples=3)
        assert defended.is_random
        with pytest.raises(InvalidInputError):
            defended.predict_label(np.array([0.5, 0.5]))

    def test_naive_gradient_through_quantization_vanishes(self, diagonal_model):
        defended = DefendedModel((diagonal_model,), (BitDepthReduction(2),))
        assert defended.has_non_differentiable
        trace = defended.trace(np.array([0.4, 0.6]))
        assert np.all(trace.backward(np.array([1.0, -1.0])) == 0.0)

    def test_identity_substitute_recovers_member_gradient(self, diagonal_model):
        defended = DefendedModel((diagonal_model,), (BitDepthReduction(2),))
        x = np.array([0.4, 0.6])
        trace = defended.trace(x, substitute=identity_substitute)
        quantized = np.round(x * 3) / 3
        member = diagonal_model.trace(quantized)
        np.testing.assert_allclose(trace.backward(np.array([0.3, -0.7])), member.backward(np.array([0.3, -0.7])))

    def test_describe(self, diagonal_model):
        defended = DefendedModel((diagonal_model,), (BitDepthReduction(2),), noise_sigma=0.1, noise_samples=4,
                                 name="mixed")
        assert defended.describe() == {"name": "mixed", "members": 1,
                                       "transforms": [{"kind": "bit_depth", "bits": 2}],
                                       "noise_sigma": 0.1, "noise_samples": 4}


class TestNoiseEnsemble:

    def test_zero_noise_is_plain_softmax(self, trained_mlp):
        x = np.array([0.4, 0.55])
        np.testing.assert_allclose(noise_ensemble_forward(trained_mlp, x, 0.0, 5, seed=1),
                                   softmax(forward(trained_mlp, x)))

    def test_more_draws_reduce_variance(self):
        model = linear_classifier([[0.0, 0.0], [10.0, -10.0]], [0.0, 0.0])
        x = np.array([0.5, 0.5])
        single = [noise_ensemble_forward(model, x, 0.1, 1, seed=s)[1] for s in range(40)]
        many = [noise_ensemble_forward(model, x, 0.1, 100, seed=s)[1] for s in range(40)]
        assert np.var(many) < np.var(single) / 20

    def test_needs_a_draw(self, diagonal_model):
        with pytest.raises(InvalidInputError):
            noise_ensemble_forward(diagonal_model, np.array([0.5, 0.5]), 0.1, 0, seed=0)

    def test_seeded_output_is_deterministic(self, diagonal_model):
        x = np.array([0.45, 0.5])
        a = noise_ensemble_forward(diagonal_model, x, 0.2, 7, seed=3)
        b = noise_ensemble_forward(diagonal_model, x, 0.2, 7, seed=3)
        assert a.tobytes() == b.tobytes()


class TestEnsembleMean:

    def test_single_member(self, trained_mlp):
        x = np.array([0.7, 0.2])
        np.testing.assert_allclose(ensemble_mean([trained_mlp], x), softmax(forward(trained_mlp, x)))

    def test_opposite_members_tie(self):
        members = [constant_model([5.0, -5.0]), constant_model([-5.0, 5.0])]
        probs = ensemble_mean(members, np.array([0.5, 0.5]))
        assert probs[0] == probs[1]
        assert DefendedModel(tuple(members)).predict_label(np.array([0.5, 0.5])) == 0


class TestAdversarialTraining:

    def test_zero_budget_is_natural_training(self, gaussian_split):
        train, _ = gaussian_split
        robust, _ = adversarial_train(train, "linear", ThreatSpec(Norm.LINF, eps=0.0), epochs=3, seed=5)
        natural, _ = natural_train(train.inputs, train.labels, "linear", train.input_shape, 2, epochs=3, seed=5)
        for a, b in zip(robust.params, natural.params):
            for key in a:
                np.testing.assert_array_equal(a[key], b[key])

    def test_fixed_seed_is_deterministic(self, gaussian_split):
        train, _ = gaussian_split
        small = train.subset(range(64))
        spec = ThreatSpec(Norm.LINF, eps=0.1)
        first, _ = adversarial_train(small, "mlp", spec, attack_iters=3, epochs=2, seed=2, hidden=8)
        second, _ = adversarial_train(small, "mlp", spec, attack_iters=3, epochs=2, seed=2, hidden=8)
        for a, b in zip(first.params, second.params):
            for key in a:
                assert a[key].tobytes() == b[key].tobytes()

    def test_invalid_iterations(self, gaussian_split):
        train, _ = gaussian_split
        with pytest.raises(InvalidInputError):
            adversarial_train(train, "linear", ThreatSpec(Norm.LINF, eps=0.1), attack_iters=0)

    @pytest.mark.parametrize("norm", [Norm.LINF, Norm.L2])
    def test_pgd_examples_are_feasible(self, trained_mlp, gaussian_split, rng, norm):
        _, evaluation = gaussian_split
        spec = ThreatSpec(norm, eps=0.1)
        adv = pgd_examples(trained_mlp, evaluation.inputs, evaluation.labels, spec, 5, 0.05, rng)
        for a, x in zip(adv, evaluation.inputs):
            assert dist(a, x, norm) <= 0.1 + 1e-9
        assert adv.min() >= 0.0 and adv.max() <= 1.0

    def test_pgd_examples_increase_loss(self, trained_mlp, gaussian_split, rng):
        _, evaluation = gaussian_split
        spec = ThreatSpec(Norm.LINF, eps=0.1)
        adv = pgd_examples(trained_mlp, evaluation.inputs, evaluation.labels, spec, 5, 0.05, rng)
        clean_loss = trained_mlp.log_probabilities(evaluation.inputs)[np.arange(len(adv)), evaluation.labels]
        adv_loss = trained_mlp.log_probabilities(adv)[np.arange(len(adv)), evaluation.labels]
        assert np.mean(adv_loss) < np.mean(clean_loss)


class TestBuildDefense:

    def test_assembles_pipeline(self, diagonal_model):
        spec = DefenseSpec("quantized", ["base"], [{"kind": "bit_depth", "bits": 3}])
        defended = build_defense(spec, {"base": diagonal_model})
        assert defended.name == "quantized"
        assert defended.transforms == (BitDepthReduction(3),)
        assert defended.noise_samples == 1

    def test_unknown_model(self, diagonal_model):
        with pytest.raises(ConfigError):
            build_defense(DefenseSpec("d", ["missing"]), {"base": diagonal_model})

    def test_bad_transform(self, diagonal_model):
        with pytest.raises(ConfigError):
            build_defense(DefenseSpec("d", ["base"], [{"kind": "bit_depth", "bits": 12}]), {"base": diagonal_model})

    def test_noise_defense_is_random(self, diagonal_model):
        defended = build_defense(DefenseSpec("noisy", ["base"], noise_sigma=0.1, noise_samples=5),
                                 {"base": diagonal_model})
        assert defended.is_random
        assert defended.draws == 5
