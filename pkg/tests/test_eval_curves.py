import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attack_registry import make_attack
from attacks_whitebox import AttackOutcome
from data_io import Dataset, LabeledExample
from defenses import DefendedModel
from errors import InvalidInputError, UndefinedRateError
from eval_curves import (RobustnessCurve, SuccessProbe, accuracy, accuracy_at, asr_targeted, asr_untargeted,
                         bisect_threshold, clean_accuracy, curve_area, curve_budget, curve_from_thresholds,
                         curve_strength, evaluate_attack, median_min_perturbation, min_eps_search, victim_rng)
from threat import Goal, Norm, ThreatSpec, dist

LINF = ThreatSpec(Norm.LINF, eps=0.1)
GRID = [0.0, 0.05, 0.1, 0.25]


class TableAttack:
    """Moves listed inputs to fixed adversarial points and leaves the rest alone."""
    name = "table"
    optimized = False
    checkpointable = True
    strength_unit = "iterations"

    def __init__(self, moves):
        self.moves = {tuple(source): np.asarray(target, dtype=np.float64) for source, target in moves}

    def run(self, victim, x, spec, goal_label, seed=0, checkpoints=None, strength=None, source=None):
        x_adv = self.moves.get(tuple(float(v) for v in x), x)
        return AttackOutcome(np.array(x_adv), False, dist(x_adv, x, spec.norm))


class TestPointMetrics:

    def test_identity_scores_clean(self, diagonal_model, diagonal_data):
        identity = make_attack("identity")
        assert accuracy(diagonal_model, identity, diagonal_data, LINF) == 1.0
        assert asr_untargeted(identity, diagonal_model, diagonal_data, LINF) == 0.0

    def test_untargeted_rate_excludes_misclassified(self, diagonal_model):
        data = Dataset.from_arrays([[0.7, 0.3], [0.55, 0.5], [0.3, 0.7], [0.6, 0.4]], [1, 1, 1, 0], 2, "four")
        attack = TableAttack([((0.55, 0.5), (0.45, 0.5)), ((0.3, 0.7), (0.7, 0.3))])
        assert asr_untargeted(attack, diagonal_model, data, LINF) == 0.5
        assert accuracy(diagonal_model, attack, data, LINF) == 0.5

    def test_untargeted_rate_undefined_without_correct_examples(self, diagonal_model):
        data = Dataset.from_arrays([[0.3, 0.7], [0.6, 0.4]], [1, 0], 2, "wrong")
        with pytest.raises(UndefinedRateError):
            asr_untargeted(make_attack("identity"), diagonal_model, data, LINF)

    def test_targeted_rate_uses_all_examples(self, diagonal_model):
        data = Dataset.from_arrays([[0.7, 0.3], [0.6, 0.45], [0.3, 0.7]], [1, 1, 0], 2, "three",
                                   targets=[0, 0, 1])
        attack = TableAttack([((0.7, 0.3), (0.3, 0.7))])
        spec = ThreatSpec(Norm.LINF, Goal.TARGETED, 0.5)
        assert asr_targeted(attack, diagonal_model, data, spec) == pytest.approx(1 / 3)
        assert asr_targeted(make_attack("identity"), diagonal_model, data, spec) == 0.0

    def test_targeted_rate_needs_targeted_spec(self, diagonal_model, diagonal_data):
        with pytest.raises(InvalidInputError):
            asr_targeted(make_attack("identity"), diagonal_model, diagonal_data, LINF)

    def test_oversized_minimum_perturbation_counts_as_clean(self, diagonal_model, diagonal_data):
        deepfool = make_attack("deepfool")
        assert accuracy(diagonal_model, deepfool, diagonal_data, ThreatSpec(Norm.LINF, eps=0.01)) == 1.0
        assert accuracy(diagonal_model, deepfool, diagonal_data, ThreatSpec(Norm.LINF, eps=0.5)) == 0.0

    def test_identity_against_random_victim_is_clean_accuracy(self, trained_mlp, gaussian_split):
        _, evaluation = gaussian_split
        noisy = DefendedModel((trained_mlp,), noise_sigma=0.3, noise_samples=1)
        assert accuracy(noisy, make_attack("identity"), evaluation, LINF, seed=4) == clean_accuracy(
            noisy, evaluation, seed=4)

    def test_concurrent_evaluation_matches_sequential(self, diagonal_model, diagonal_data):
        fgsm = make_attack("fgsm")
        sequential = evaluate_attack(diagonal_model, fgsm, diagonal_data, LINF, seed=1)
        concurrent = evaluate_attack(diagonal_model, fgsm, diagonal_data, LINF, seed=1, max_workers=3)
        np.testing.assert_array_equal(sequential.adversarial, concurrent.adversarial)

    def test_empty_dataset(self, diagonal_model, diagonal_data):
        with pytest.raises(InvalidInputError):
            evaluate_attack(diagonal_model, make_attack("identity"), diagonal_data.subset([]), LINF)


class TestBisectThreshold:

    def test_step_predicate(self):
        result = bisect_threshold(lambda eps: eps >= 0.05, 1.0, 1e-3)
        assert 0.05 <= result <= 0.05 + 1e-3

    def test_never_succeeds(self):
        assert bisect_threshold(lambda eps: False, 1.0, 1e-3) is None

    def test_threshold_below_tolerance(self):
        assert bisect_threshold(lambda eps: eps >= 1e-5, 1.0, 1e-3) <= 1e-3

    def test_success_only_at_upper_end(self):
        assert bisect_threshold(lambda eps: eps >= 0.3, 0.3, 1e-3) == pytest.approx(0.3)

    def test_invalid_tolerance(self):
        with pytest.raises(InvalidInputError):
            bisect_threshold(lambda eps: True, 1.0, 0.0)

    @settings(max_examples=100, deadline=None)
    @given(threshold=st.floats(1e-4, 0.99), tol=st.floats(1e-4, 1e-2))
    def test_brackets_any_threshold(self, threshold, tol):
        result = bisect_threshold(lambda eps: eps >= threshold, 1.0, tol)
        assert threshold <= result <= threshold + tol


class TestMinEpsSearch:

    def test_misclassified_example_needs_nothing(self, diagonal_model, diagonal_data):
        flipped = LabeledExample(diagonal_data[0].x, 0)
        assert min_eps_search(make_attack("fgsm"), diagonal_model, flipped, LINF, 0.5) == 0.0

    def test_fgsm_finds_half_the_margin(self, diagonal_model, diagonal_data):
        eps_star = min_eps_search(make_attack("fgsm"), diagonal_model, diagonal_data[1], LINF, 0.5)
        assert abs(eps_star - 0.075) <= 1.0 / 510

    def test_failure_within_bracket(self, diagonal_model, diagonal_data):
        assert min_eps_search(make_attack("fgsm"), diagonal_model, diagonal_data[1], LINF, 0.05) is None

    def test_minimum_perturbation_attack_reports_its_own_norm(self, diagonal_model, diagonal_data):
        deepfool = make_attack("deepfool")
        assert min_eps_search(deepfool, diagonal_model, diagonal_data[1], LINF, 0.5) == pytest.approx(0.075 * 1.02)
        assert min_eps_search(deepfool, diagonal_model, diagonal_data[1], LINF, 0.05) is None


class TestBudgetCurve:

    def test_zero_budget_only(self, diagonal_model, diagonal_data):
        curve = curve_budget(make_attack("fgsm"), diagonal_model, diagonal_data, LINF, [0.0])
        assert curve.points == [(0.0, 1.0, 0.0)]
        assert curve.n == 6 and curve.m == 6

    @pytest.mark.parametrize("method", ["threshold", "pointwise"])
    def test_fgsm_on_linear_model(self, diagonal_model, diagonal_data, method):
        curve = curve_budget(make_attack("fgsm"), diagonal_model, diagonal_data, LINF, GRID, method=method)
        np.testing.assert_allclose(curve.accuracies, [1.0, 4 / 6, 2 / 6, 0.0])
        np.testing.assert_allclose(curve.asrs, [0.0, 2 / 6, 4 / 6, 1.0])
        assert curve.construction == method

    def test_deepfool_counts_its_perturbations(self, diagonal_model, diagonal_data):
        curve = curve_budget(make_attack("deepfool"), diagonal_model, diagonal_data, LINF, GRID)
        np.testing.assert_allclose(curve.accuracies, [1.0, 4 / 6, 2 / 6, 0.0])

    def test_threshold_curve_never_increases(self, trained_mlp, gaussian_split):
        _, evaluation = gaussian_split
        grid = [0.0, 0.05, 0.1, 0.2, 0.3]
        curve = curve_budget(make_attack("bim", iters=5), trained_mlp, evaluation.subset(range(15)), LINF, grid)
        assert np.all(np.diff(curve.accuracies) <= 0)
        assert curve.accuracies[0] == clean_accuracy(trained_mlp, evaluation.subset(range(15)))

    def test_unknown_method(self, diagonal_model, diagonal_data):
        with pytest.raises(InvalidInputError):
            curve_budget(make_attack("fgsm"), diagonal_model, diagonal_data, LINF, GRID, method="sampled")

    @pytest.mark.parametrize("grid", [[], [0.1, 0.05], [-0.1, 0.2]])
    def test_invalid_grid(self, diagonal_model, diagonal_data, grid):
        with pytest.raises(InvalidInputError):
            curve_budget(make_attack("fgsm"), diagonal_model, diagonal_data, LINF, grid)

    def test_counting_from_thresholds(self):
        correct = np.array([True, True, True, False])
        points = curve_from_thresholds([0.0, 0.1, 0.2], [0.05, 0.15, None, 0.0], correct, targeted=False)
        assert points == [(0.0, 0.75, 0.0), (0.1, 0.5, 1 / 3), (0.2, 0.25, 2 / 3)]

    def test_random_victim_is_flagged(self, trained_mlp, gaussian_split):
        _, evaluation = gaussian_split
        noisy = DefendedModel((trained_mlp,), noise_sigma=0.05, noise_samples=2, name="noisy")
        curve = curve_budget(make_attack("fgsm"), noisy, evaluation.subset(range(5)), LINF, [0.0, 0.1])
        assert curve.approximate
        assert curve.defense == "noisy"


class TestStrengthCurve:

    def test_strength_zero_is_clean(self, diagonal_model, diagonal_data):
        curve = curve_strength(make_attack("bim"), diagonal_model, diagonal_data, LINF, [0])
        assert curve.points == [(0.0, 1.0, 0.0)]

    def test_checkpoints_match_truncated_runs(self, trained_mlp, gaussian_split):
        _, evaluation = gaussian_split
        small = evaluation.subset(range(12))
        curve = curve_strength(make_attack("bim"), trained_mlp, small, LINF, [0, 1, 3, 8])
        for strength, acc in zip([1, 3, 8], curve.accuracies[1:]):
            assert acc == accuracy(trained_mlp, make_attack("bim", iters=strength), small, LINF)
        assert curve.construction == "checkpoint"
        assert curve.extra == {"eps": 0.1, "unit": "iterations"}

    def test_rerun_for_attacks_without_checkpoints(self, diagonal_model, diagonal_data):
        curve = curve_strength(make_attack("cw", c_search_steps=2), diagonal_model, diagonal_data,
                               ThreatSpec(Norm.L2, eps=1.0), [0, 5])
        assert curve.construction == "rerun"
        assert curve.accuracies[0] == 1.0

    def test_query_strengths_capped(self, diagonal_model, diagonal_data):
        with pytest.raises(InvalidInputError):
            curve_strength(make_attack("nes"), diagonal_model, diagonal_data, LINF, [0, 30000])


class TestCurveType:

    def test_round_trip(self):
        curve = RobustnessCurve("budget", [(0.0, 1.0, 0.0), (0.1, 0.5, None)], "fgsm", "natural", "linf",
                                "untargeted", 3, 6, 6, extra={"substitute": "trades"})
        assert RobustnessCurve.from_dict(curve.to_dict()).to_dict() == curve.to_dict()

    @pytest.mark.parametrize("points", [[(0.1, 1.0, 0.0), (0.1, 0.5, 0.5)], [(0.0, 1.5, 0.0)]])
    def test_invalid_points(self, points):
        with pytest.raises(InvalidInputError):
            RobustnessCurve("budget", points, "a", "d", "linf", "untargeted", 0, 1, 1)

    def test_area_and_lookup(self):
        curve = RobustnessCurve("budget", [(0.0, 1.0, 0.0), (0.5, 0.5, 0.5), (1.0, 0.0, 1.0)], "a", "d", "linf",
                                "untargeted", 0, 2, 2)
        assert curve_area(curve) == pytest.approx(0.5)
        assert accuracy_at(curve, 0.7) == 0.5
        with pytest.raises(InvalidInputError):
            accuracy_at(curve, -0.1)


class TestMedian:

    @pytest.mark.parametrize("values, expected", [
        ([0.1, 0.3, 0.2], 0.2),
        ([0.1, None], float("inf")),
        ([0.1, 0.3], 0.2),
    ])
    def test_examples(self, values, expected):
        assert median_min_perturbation(values) == pytest.approx(expected)

    def test_outcomes_use_their_minimum_perturbation(self):
        outcomes = [AttackOutcome(np.zeros(1), True, 0.4, eps_star=0.4),
                    AttackOutcome(np.zeros(1), False, 0.0)]
        assert median_min_perturbation(outcomes) == float("inf")

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            median_min_perturbation([])


class TestProbes:

    def test_victim_draws_are_seeded(self):
        assert victim_rng(1, 2, 3).uniform() == victim_rng(1, 2, 3).uniform()
        assert victim_rng(1, 2, 3).uniform() != victim_rng(1, 2, 4).uniform()

    def test_unchanged_input_reuses_clean_prediction(self, diagonal_model):
        x = np.array([0.6, 0.45])
        probe = SuccessProbe(diagonal_model, x, 1, LINF, 0, 0, clean_pred=0, generate=None, optimized=False)
        assert probe.predict(AttackOutcome(x.copy(), False, 0.0), 0.1) == 0
        assert probe.probes == 0
        assert probe.predict(AttackOutcome(np.array([0.6, 0.46]), False, 0.01), 0.1) == 1
        assert probe.probes == 1
