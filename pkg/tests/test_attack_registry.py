import numpy as np
import pytest

from attack_registry import DESCRIPTORS, TRANSFER_ITERS, compatibility_matrix, derive_seeds, make_attack
from attacks_whitebox import bim
from defenses import DefendedModel, identity_substitute
from errors import ConfigError
from input_transforms import BitDepthReduction
from tensor_core import linear_classifier
from threat import Goal, Norm, ThreatSpec

X = np.array([0.6, 0.45])
LINF = ThreatSpec(Norm.LINF, eps=0.1)


class TestRegistry:

    def test_matrix_covers_every_method(self):
        matrix = compatibility_matrix()
        assert set(matrix) == {"identity", "fgsm", "bim", "mim", "deepfool", "cw", "dim", "zoo", "nes", "spsa",
                               "nattack", "boundary", "evolutionary"}
        assert matrix["deepfool"]["goals"] == ["untargeted"]
        for method in ("cw", "zoo", "boundary", "evolutionary"):
            assert matrix[method]["distances"] == ["l2"]
        assert matrix["boundary"]["knowledge"] == ["decision"]
        assert matrix["nes"]["strength_unit"] == "queries"
        assert not matrix["cw"]["checkpointable"]

    def test_optimized_capability(self):
        assert {m for m, d in DESCRIPTORS.items() if d.optimized} == {"deepfool", "cw", "zoo", "boundary",
                                                                     "evolutionary"}

    def test_default_knowledge(self):
        assert make_attack("fgsm").knowledge == "white"
        assert make_attack("nes").knowledge == "score"
        assert make_attack("my-dim", method="dim").knowledge == "transfer"

    @pytest.mark.parametrize("kwargs", [
        {"name": "pgd"},
        {"name": "cw", "knowledge": "score"},
        {"name": "fgsm", "knowledge": "gray"},
        {"name": "bim", "momentum": 0.5},
    ])
    def test_invalid_configuration(self, kwargs):
        with pytest.raises(ConfigError):
            make_attack(**kwargs)

    def test_transfer_runs_fewer_iterations(self):
        assert make_attack("bim").settings["iters"] == 20
        assert make_attack("bim", knowledge="transfer").settings["iters"] == TRANSFER_ITERS == 10
        assert make_attack("bim", knowledge="transfer", iters=4).settings["iters"] == 4

    def test_cw_defaults_to_plain_gradient_descent(self):
        settings = make_attack("cw").settings
        assert settings["optimizer"] == "gd"
        assert settings["lr"] == 0.01
        assert make_attack("cw", optimizer="adam").settings["optimizer"] == "adam"


    def test_max_strength(self):
        assert make_attack("fgsm").max_strength == 1
        assert make_attack("mim").max_strength == 20
        assert make_attack("spsa", query_cap=500).max_strength == 500

    def test_incompatibility(self):
        targeted = ThreatSpec(Norm.L2, Goal.TARGETED, 1.0)
        assert "untargeted" in make_attack("deepfool").incompatibility(targeted)
        assert "l2" in make_attack("cw").incompatibility(LINF)
        assert make_attack("cw").incompatibility(targeted) is None
        with pytest.raises(ConfigError):
            make_attack("boundary").check_compatible(LINF)

    def test_seeds(self):
        assert derive_seeds(3) == derive_seeds(3)
        attack_seed, victim_seed = derive_seeds(3)
        assert attack_seed != victim_seed
        assert derive_seeds(4) != derive_seeds(3)

    def test_to_dict(self):
        assert make_attack("strong-bim", method="bim", iters=40).to_dict() == {
            "name": "strong-bim", "method": "bim", "knowledge": "white", "capability": "constrained",
            "params": {"iters": 40}}


class TestGradOracle:

    def test_adaptive_against_quantization(self, diagonal_model):
        quantized = DefendedModel((diagonal_model,), (BitDepthReduction(2),))
        assert make_attack("bim").grad_oracle(quantized, 0).substitute is identity_substitute
        assert make_attack("bim", adaptive=False).grad_oracle(quantized, 0).substitute is None

    def test_eot_samples_against_randomness(self, diagonal_model):
        noisy = DefendedModel((diagonal_model,), noise_sigma=0.1, noise_samples=2)
        assert make_attack("bim").grad_oracle(noisy, 0).k_samples == 10
        assert make_attack("bim", eot_samples=3).grad_oracle(noisy, 0).k_samples == 3
        assert make_attack("bim").grad_oracle(diagonal_model, 0).k_samples == 1


class TestRun:

    def test_white_box_matches_direct_call(self, diagonal_model):
        outcome = make_attack("bim", iters=8).run(diagonal_model, X, LINF, 1, seed=2)
        np.testing.assert_array_equal(outcome.x_adv, bim(diagonal_model, X, LINF, 1, iters=8).x_adv)
        assert outcome.success

    def test_strength_truncates_run(self, diagonal_model):
        outcome = make_attack("bim").run(diagonal_model, X, LINF, 1, strength=2)
        assert outcome.iterations_used == 2

    def test_identity_is_judged_on_victim(self, diagonal_model):
        assert not make_attack("identity").run(diagonal_model, X, LINF, 1).success
        assert make_attack("identity").run(diagonal_model, [0.3, 0.7], LINF, 1).success

    def test_transfer_success_is_judged_on_victim(self, diagonal_model):
        stubborn = linear_classifier(np.zeros((2, 2)), [0.0, 1.0])
        family = make_attack("fgsm", knowledge="transfer")
        assert family.run(diagonal_model, X, LINF, 1, substitute=diagonal_model).success
        assert not family.run(stubborn, X, LINF, 1, substitute=diagonal_model).success

    def test_transfer_needs_substitute(self, diagonal_model):
        with pytest.raises(ConfigError):
            make_attack("fgsm", knowledge="transfer").run(diagonal_model, X, LINF, 1)

    def test_query_attack_respects_cap(self, diagonal_model):
        outcome = make_attack("nes", query_cap=150, q=20).run(diagonal_model, [0.52, 0.5], LINF, 1, seed=1)
        assert outcome.queries_used <= 150

    def test_decision_attack_uses_source_for_targets(self, diagonal_model):
        spec = ThreatSpec(Norm.L2, Goal.TARGETED, 1.0)
        family = make_attack("boundary", query_cap=300)
        assert family.run(diagonal_model, X, spec, 0, source=np.array([0.1, 0.9])).success

    def test_incompatible_spec_rejected(self, diagonal_model):
        with pytest.raises(ConfigError):
            make_attack("cw").run(diagonal_model, X, LINF, 1)

    def test_checkpoints_for_single_step(self, diagonal_model):
        outcome = make_attack("fgsm").run(diagonal_model, X, LINF, 1, checkpoints=[0, 1])
        np.testing.assert_array_equal(outcome.snapshots[0], X)
        np.testing.assert_array_equal(outcome.snapshots[1], outcome.x_adv)
