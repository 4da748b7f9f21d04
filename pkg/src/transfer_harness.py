"""
Transfer-based evaluation.

Adversarial examples are crafted once on a substitute model and replayed
against every target. Budget curves use the same threshold construction as
white-box curves, with each target's success predicate probing the
substitute-crafted examples.
"""

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from attacks_whitebox import AttackOutcome
from data_io import Dataset
from errors import InvalidInputError
from eval_curves import (RobustnessCurve, SuccessProbe, _check_grid, _metadata, _threshold_of, clean_predictions,
                         curve_area, curve_from_thresholds, default_tol, example_seed, goal_labels, rates)
from threat import ThreatSpec

logger = logging.getLogger(__name__)


class CraftedExamples:
    """Substitute-crafted adversarial examples keyed by (example index, budget), each crafted once."""

    def __init__(self, attack_family, substitute, dataset: Dataset, spec: ThreatSpec, seed: int):
        self.attack_family = attack_family
        self.substitute = substitute
        self.dataset = dataset
        self.spec = spec
        self.seed = seed
        self.goals = goal_labels(dataset, spec)
        self._cache: Dict[Tuple[int, float], AttackOutcome] = {}
        self._locks = [threading.Lock() for _ in range(len(dataset))]
        self.crafted = 0

    def get(self, index: int, eps: float) -> AttackOutcome:
        key = (index, float(eps))
        with self._locks[index]:
            if key not in self._cache:
                ex = self.dataset[index]
                self._cache[key] = self.attack_family.run(
                    self.substitute, ex.x, self.spec.with_eps(eps), int(self.goals[index]),
                    seed=example_seed(self.seed, index), substitute=self.substitute)
                self.crafted += 1
            return self._cache[key]

    def generator(self, index: int):
        return lambda eps: self.get(index, eps)


def _target_curve(name: str, target, crafted: CraftedExamples, dataset: Dataset, spec: ThreatSpec,
                  grid: np.ndarray, seed: int, method: str, tol: float, eps_max: float,
                  substitute_name: str) -> RobustnessCurve:
    clean = clean_predictions(target, dataset, seed)
    correct = clean == dataset.labels
    goals = crafted.goals
    optimized = getattr(crafted.attack_family, "optimized", False)
    probes = [SuccessProbe(target, dataset[i].x, int(goals[i]), spec, seed, i, int(clean[i]),
                           crafted.generator(i), optimized) for i in range(len(dataset))]

    if method == "threshold":
        thresholds = [_threshold_of(probe, eps_max, tol) for probe in probes]
        points = curve_from_thresholds(grid, thresholds, correct, spec.targeted)
    elif method == "pointwise":
        points = []
        for eps in grid:
            if eps == 0:
                adversarial = clean
            else:
                adversarial = np.array([probe.predict(crafted.get(i, eps), eps) for i, probe in enumerate(probes)])
            hit = adversarial == goals if spec.targeted else adversarial != dataset.labels
            points.append((float(eps),) + rates(correct, hit, adversarial == dataset.labels, spec.targeted))
    else:
        raise InvalidInputError(f"Unknown budget curve method '{method}' (expected threshold or pointwise)")

    meta = _metadata(crafted.attack_family, target, dataset, spec, seed, correct)
    meta["defense"] = name
    return RobustnessCurve("budget", points, construction=method, extra={"substitute": substitute_name}, **meta)


def transfer_eval(substitute, targets: Mapping[str, object], attack_family, dataset: Dataset, spec: ThreatSpec,
                  eps_grid: Sequence[float], seed: int = 0, method: str = "threshold", tol: Optional[float] = None,
                  eps_max: Optional[float] = None, max_workers: int = 1,
                  substitute_name: Optional[str] = None) -> Dict[str, RobustnessCurve]:
    """
    Budget curves of every target against examples crafted on the substitute.

    Args:
        substitute: Model the attack takes gradients on
        targets: Mapping of target name -> model
        attack_family: Configured gradient-based attack
        dataset: Evaluation set
        spec: Threat spec (its eps is ignored)
        eps_grid: Strictly increasing budgets
        seed: Run seed
        method: "threshold" or "pointwise"
        tol: Search resolution
        eps_max: Search bracket (defaults to the last grid value)
        max_workers: Targets evaluated concurrently
        substitute_name: Recorded in each curve's metadata

    Returns:
        Mapping of target name -> RobustnessCurve, in target order
    """
    grid = _check_grid(eps_grid, "eps_grid")
    tol = default_tol(spec.norm) if tol is None else tol
    eps_max = float(grid[-1]) if eps_max is None else eps_max
    substitute_name = substitute_name or getattr(substitute, "name", "substitute")
    crafted = CraftedExamples(attack_family, substitute, dataset, spec, seed)
    logger.info(f"Transfer: {getattr(attack_family, 'name', 'attack')} crafted on {substitute_name}, "
                f"{len(targets)} targets, seed {seed}")

    def evaluate(name: str) -> RobustnessCurve:
        return _target_curve(name, targets[name], crafted, dataset, spec, grid, seed, method, tol, eps_max,
                             substitute_name)

    names = list(targets)
    if max_workers <= 1:
        curves = [evaluate(name) for name in names]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            curves = list(pool.map(evaluate, names))
    logger.debug(f"Transfer crafted {crafted.crafted} adversarial examples")
    return dict(zip(names, curves))


def robustness_ranking(white_box_curves: Mapping[str, RobustnessCurve],
                       clean_accuracies: Mapping[str, float]) -> List[str]:
    """Model names from most to least robust by white-box curve area, ties by clean accuracy."""
    return sorted(white_box_curves,
                  key=lambda name: (-curve_area(white_box_curves[name]), -clean_accuracies.get(name, 0.0), name))


def select_substitutes(white_box_curves: Mapping[str, RobustnessCurve],
                       clean_accuracies: Mapping[str, float]) -> Dict[str, str]:
    """
    Role-based substitute choice.

    The most robust model crafts the examples for every other model; the
    second most robust crafts them for the most robust one.

    Returns:
        Mapping of target name -> substitute name, in input order

    Raises:
        InvalidInputError: With fewer than two models
    """
    if len(white_box_curves) < 2:
        raise InvalidInputError("Substitute selection needs at least two models")
    ranking = robustness_ranking(white_box_curves, clean_accuracies)
    strongest, runner_up = ranking[0], ranking[1]
    logger.info(f"Substitutes: {strongest} for all others, {runner_up} for {strongest}")
    return {name: (runner_up if name == strongest else strongest) for name in white_box_curves}
