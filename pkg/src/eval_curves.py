"""
Evaluation engine: accuracy and attack success rates, the minimum-budget
search, and the two robustness curves (accuracy/ASR against perturbation
budget and against attack strength).

Attacks are anything with the AttackFamily interface:
`run(victim, x, spec, goal_label, seed, checkpoints=None, strength=None,
source=None)` plus the `name`, `optimized` and `checkpointable` attributes.

Randomized victims are evaluated on one seeded draw per probe. Probe 0 of
every example is its clean prediction; any probe whose input is x itself
reuses that prediction so that unchanged inputs always score like the clean
input.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid

from attacks_blackbox import DEFAULT_QUERY_CAP
from attacks_whitebox import AttackOutcome, is_success
from data_io import Dataset, LabeledExample
from errors import InvalidInputError, UndefinedRateError
from threat import FEASIBILITY_TOL, Norm, ThreatSpec, dist

try:
    from tqdm import tqdm
    HAS_TQDM = True
except ImportError:
    HAS_TQDM = False

logger = logging.getLogger(__name__)

MAX_BISECTIONS = 20
DEFAULT_TOL = {Norm.LINF: 1.0 / 510, Norm.L2: 1e-3}

CurvePoint = Tuple[float, float, Optional[float]]


@dataclass
class RobustnessCurve:
    """Accuracy and ASR against budget (kind "budget") or strength (kind "strength")."""
    kind: str
    points: List[CurvePoint]
    attack: str
    defense: str
    norm: str
    goal: str
    seed: int
    n: int
    m: int
    approximate: bool = False
    construction: str = "threshold"
    extra: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("budget", "strength"):
            raise InvalidInputError(f"Unknown curve kind '{self.kind}'")
        xs = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise InvalidInputError(f"Curve abscissae must be strictly increasing: {xs}")
        for _, acc, asr in self.points:
            if not 0.0 <= acc <= 1.0 or (asr is not None and not 0.0 <= asr <= 1.0):
                raise InvalidInputError(f"Curve values out of [0, 1]: acc={acc} asr={asr}")

    @property
    def abscissae(self) -> np.ndarray:
        return np.array([p[0] for p in self.points], dtype=np.float64)

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([p[1] for p in self.points], dtype=np.float64)

    @property
    def asrs(self) -> List[Optional[float]]:
        return [p[2] for p in self.points]

    def to_dict(self) -> dict:
        data = {
            "kind": self.kind,
            "attack": self.attack,
            "defense": self.defense,
            "norm": self.norm,
            "goal": self.goal,
            "seed": self.seed,
            "n": self.n,
            "m": self.m,
            "approximate": self.approximate,
            "construction": self.construction,
            "points": [{"x": float(x), "acc": float(acc), "asr": None if asr is None else float(asr)}
                       for x, acc, asr in self.points],
        }
        if self.extra:
            data["extra"] = dict(self.extra)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RobustnessCurve":
        return cls(
            kind=data["kind"],
            points=[(p["x"], p["acc"], p["asr"]) for p in data["points"]],
            attack=data["attack"],
            defense=data["defense"],
            norm=data["norm"],
            goal=data["goal"],
            seed=data["seed"],
            n=data["n"],
            m=data["m"],
            approximate=data.get("approximate", False),
            construction=data.get("construction", "threshold"),
            extra=dict(data.get("extra", {})),
        )


# ---------------------------------------------------------------------------
# Seeds, labels and per-example plumbing
# ---------------------------------------------------------------------------

def victim_rng(seed: int, index: int, probe: int) -> np.random.Generator:
    """Generator for one evaluation draw of a randomized victim."""
    return np.random.default_rng([int(seed), int(index), int(probe)])


def example_seed(seed: int, index: int) -> int:
    """Attack seed of one example."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def goal_label(example: LabeledExample, spec: ThreatSpec) -> int:
    if not spec.targeted:
        return example.y
    if example.target is None:
        raise InvalidInputError("Targeted evaluation needs target labels (see assign_targets)")
    return example.target


def goal_labels(dataset: Dataset, spec: ThreatSpec) -> np.ndarray:
    return np.array([goal_label(ex, spec) for ex in dataset.examples], dtype=np.int64)


def clean_predictions(model, dataset: Dataset, seed: int = 0) -> np.ndarray:
    """Probe-0 predictions of every example."""
    return np.array([model.predict_label(ex.x, victim_rng(seed, i, 0))
                     for i, ex in enumerate(dataset.examples)], dtype=np.int64)


def clean_accuracy(model, dataset: Dataset, seed: int = 0) -> float:
    return float(np.mean(clean_predictions(model, dataset, seed) == dataset.labels))


def target_sources(dataset: Dataset, clean_preds: np.ndarray) -> Dict[int, np.ndarray]:
    """First input the model assigns to each class (starting points of targeted decision attacks)."""
    sources = {}
    for ex, pred in zip(dataset.examples, clean_preds):
        sources.setdefault(int(pred), ex.x)
    return sources


def effective_input(outcome: AttackOutcome, x: np.ndarray, spec: ThreatSpec, optimized: bool) -> np.ndarray:
    """
    The input the victim is evaluated on.

    A minimum-perturbation attack whose perturbation exceeds the budget counts
    as having returned x unchanged.
    """
    if optimized and outcome.pert_norm > spec.eps + FEASIBILITY_TOL:
        return x
    return outcome.x_adv


def _map_examples(fn: Callable[[int], object], count: int, max_workers: int = 1, progress: bool = False,
                  desc: str = "Examples") -> list:
    """Apply fn to 0..count-1, preserving index order regardless of completion order."""
    show = progress and HAS_TQDM
    if max_workers <= 1:
        indices = tqdm(range(count), desc=desc, leave=False) if show else range(count)
        return [fn(i) for i in indices]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        results = pool.map(fn, range(count))
        if show:
            results = tqdm(results, total=count, desc=desc, leave=False)
        return list(results)


class SuccessProbe:
    """Success predicate of one example against one victim, one seeded draw per probe."""

    def __init__(self, victim, x: np.ndarray, goal: int, spec: ThreatSpec, seed: int, index: int,
                 clean_pred: int, generate: Callable[[float], AttackOutcome], optimized: bool):
        self.victim = victim
        self.x = x
        self.goal = goal
        self.spec = spec
        self.seed = seed
        self.index = index
        self.clean_pred = clean_pred
        self.generate = generate
        self.optimized = optimized
        self.probes = 0

    def predict(self, outcome: AttackOutcome, eps: float) -> int:
        x_eval = effective_input(outcome, self.x, self.spec.with_eps(eps), self.optimized)
        if np.array_equal(x_eval, self.x):
            return self.clean_pred
        self.probes += 1
        return self.victim.predict_label(x_eval, victim_rng(self.seed, self.index, self.probes))

    def succeeds(self, outcome: AttackOutcome, eps: float) -> bool:
        return is_success(self.predict(outcome, eps), self.goal, self.spec)

    def __call__(self, eps: float) -> bool:
        return self.succeeds(self.generate(eps), eps)


# ---------------------------------------------------------------------------
# Point metrics
# ---------------------------------------------------------------------------

@dataclass
class PointEvaluation:
    """Clean and adversarial predictions of a dataset at one budget."""
    labels: np.ndarray
    goals: np.ndarray
    clean: np.ndarray
    adversarial: np.ndarray
    outcomes: List[AttackOutcome]

    @property
    def correct(self) -> np.ndarray:
        return self.clean == self.labels


def evaluate_attack(model, attack, dataset: Dataset, spec: ThreatSpec, seed: int = 0, max_workers: int = 1,
                    progress: bool = False, clean: Optional[np.ndarray] = None) -> PointEvaluation:
    """Run the attack once per example at spec.eps and predict on the results."""
    if len(dataset) == 0:
        raise InvalidInputError("Cannot evaluate on an empty dataset")
    clean = clean_predictions(model, dataset, seed) if clean is None else clean
    goals = goal_labels(dataset, spec)
    sources = target_sources(dataset, clean) if spec.targeted else {}
    optimized = getattr(attack, "optimized", False)

    def run_one(i: int):
        ex = dataset[i]
        outcome = attack.run(model, ex.x, spec, int(goals[i]), seed=example_seed(seed, i),
                             source=sources.get(int(goals[i])))
        probe = SuccessProbe(model, ex.x, int(goals[i]), spec, seed, i, int(clean[i]), None, optimized)
        return outcome, probe.predict(outcome, spec.eps)

    results = _map_examples(run_one, len(dataset), max_workers, progress, desc=getattr(attack, "name", "attack"))
    return PointEvaluation(dataset.labels, goals, clean,
                           np.array([pred for _, pred in results], dtype=np.int64),
                           [outcome for outcome, _ in results])


def _untargeted_rate(correct: np.ndarray, flipped: np.ndarray) -> float:
    m = int(np.sum(correct))
    if m == 0:
        raise UndefinedRateError("Untargeted ASR is undefined: no example is classified correctly")
    return float(np.sum(correct & flipped)) / m


def accuracy(model, attack, dataset: Dataset, spec: ThreatSpec, seed: int = 0, max_workers: int = 1) -> float:
    """(1/N) * #{i : C(A(x_i)) = y_i}."""
    result = evaluate_attack(model, attack, dataset, spec, seed, max_workers)
    return float(np.mean(result.adversarial == result.labels))


def asr_untargeted(attack, model, dataset: Dataset, spec: ThreatSpec, seed: int = 0, max_workers: int = 1) -> float:
    """
    Fraction of correctly classified examples the attack flips.

    Raises:
        UndefinedRateError: If no example is classified correctly
    """
    result = evaluate_attack(model, attack, dataset, spec, seed, max_workers)
    return _untargeted_rate(result.correct, result.adversarial != result.labels)


def asr_targeted(attack, model, dataset: Dataset, spec: ThreatSpec, seed: int = 0, max_workers: int = 1) -> float:
    """(1/N) * #{i : C(A(x_i)) = y*_i}; the denominator is N, not the clean-correct count."""
    if not spec.targeted:
        raise InvalidInputError("asr_targeted needs a targeted threat spec")
    result = evaluate_attack(model, attack, dataset, spec, seed, max_workers)
    return float(np.mean(result.adversarial == result.goals))


def rates(correct: np.ndarray, adversarial_hit: np.ndarray, labels_kept: np.ndarray,
          targeted: bool) -> Tuple[float, Optional[float]]:
    """
    Accuracy and ASR of one curve point.

    Args:
        correct: Clean prediction equals the label
        adversarial_hit: The attack achieved its goal on the example
        labels_kept: The attacked prediction equals the label
        targeted: Goal of the attack

    Returns:
        (accuracy, asr); the untargeted ASR is None when nothing is correct
    """
    acc = float(np.mean(labels_kept))
    if targeted:
        return acc, float(np.mean(adversarial_hit))
    if not np.any(correct):
        return acc, None
    return acc, _untargeted_rate(correct, adversarial_hit)


# ---------------------------------------------------------------------------
# Minimum budget search
# ---------------------------------------------------------------------------

def default_tol(norm) -> float:
    return DEFAULT_TOL[Norm(norm)]


def bisect_threshold(predicate: Callable[[float], bool], eps_max: float, tol: float,
                     max_steps: int = MAX_BISECTIONS) -> Optional[float]:
    """
    Smallest budget at which a monotone predicate holds, to within tol.

    A line search doubles the budget from tol until the first success (or
    eps_max), then bisection narrows the bracket for at most max_steps
    steps or until it is narrower than tol.

    Returns:
        Upper end of the final bracket, or None if the predicate fails at eps_max
    """
    if tol <= 0:
        raise InvalidInputError(f"tol must be > 0, got {tol}")
    lo, hi = 0.0, None
    eps = tol
    while eps < eps_max:
        if predicate(eps):
            hi = eps
            break
        lo = eps
        eps *= 2.0
    if hi is None:
        if not predicate(eps_max):
            return None
        hi = eps_max
    for _ in range(max_steps):
        if hi - lo < tol:
            break
        mid = (lo + hi) / 2.0
        if predicate(mid):
            hi = mid
        else:
            lo = mid
    return hi


def _threshold_of(probe: SuccessProbe, eps_max: float, tol: float) -> Optional[float]:
    if is_success(probe.clean_pred, probe.goal, probe.spec):
        return 0.0
    if probe.optimized:
        outcome = probe.generate(eps_max)
        if outcome.eps_star is None or outcome.eps_star > eps_max:
            return None
        return float(outcome.eps_star) if probe.succeeds(outcome, eps_max) else None
    return bisect_threshold(probe, eps_max, tol)


def min_eps_search(attack_family, model, example: LabeledExample, spec: ThreatSpec, eps_max: float,
                   tol: Optional[float] = None, seed: int = 0, index: int = 0, source=None) -> Optional[float]:
    """
    Minimum budget at which the attack achieves its goal on one example.

    Constrained attacks are searched with bisect_threshold; minimum-perturbation
    attacks report their own perturbation from a single run at eps_max.

    Args:
        attack_family: Configured attack
        model: Victim
        example: The example
        spec: Threat spec (its eps is ignored)
        eps_max: Upper end of the search bracket
        tol: Search resolution (1/510 for linf, 1e-3 for l2 by default)
        seed: Run seed
        index: Example index, keys the attack and victim randomness
        source: Starting point for targeted decision-based attacks

    Returns:
        eps_star, 0.0 for examples already meeting the goal, None on failure
    """
    tol = default_tol(spec.norm) if tol is None else tol
    goal = goal_label(example, spec)
    clean = model.predict_label(example.x, victim_rng(seed, index, 0))
    attack_seed = example_seed(seed, index)

    def generate(eps: float) -> AttackOutcome:
        return attack_family.run(model, example.x, spec.with_eps(eps), goal, seed=attack_seed, source=source)

    probe = SuccessProbe(model, example.x, goal, spec, seed, index, clean, generate,
                         getattr(attack_family, "optimized", False))
    return _threshold_of(probe, eps_max, tol)


# ---------------------------------------------------------------------------
# Budget curves
# ---------------------------------------------------------------------------

def _check_grid(grid: Sequence[float], name: str) -> np.ndarray:
    values = np.asarray(grid, dtype=np.float64)
    if values.ndim != 1 or len(values) == 0:
        raise InvalidInputError(f"{name} must be a non-empty list")
    if np.any(values < 0) or np.any(np.diff(values) <= 0):
        raise InvalidInputError(f"{name} must be non-negative and strictly increasing: {list(grid)}")
    return values


def curve_from_thresholds(eps_grid: Sequence[float], thresholds: Sequence[Optional[float]], correct: np.ndarray,
                          targeted: bool) -> List[CurvePoint]:
    """
    Budget-curve points by counting the examples whose minimum budget is within each eps.

    An example that the attack cannot drive to its goal at eps keeps its
    clean prediction there.
    """
    stars = np.array([np.inf if t is None else t for t in thresholds], dtype=np.float64)
    points = []
    for eps in _check_grid(eps_grid, "eps_grid"):
        hit = stars <= eps
        points.append((float(eps),) + rates(correct, hit, correct & ~hit, targeted))
    return points


def _metadata(attack, model, dataset: Dataset, spec: ThreatSpec, seed: int, correct: np.ndarray) -> dict:
    return {
        "attack": getattr(attack, "name", type(attack).__name__),
        "defense": getattr(model, "name", "model"),
        "norm": spec.norm.value,
        "goal": spec.goal.value,
        "seed": int(seed),
        "n": len(dataset),
        "m": int(np.sum(correct)),
        "approximate": bool(getattr(model, "is_random", False)),
    }


def budget_thresholds(attack_family, model, dataset: Dataset, spec: ThreatSpec, eps_max: float,
                      tol: Optional[float] = None, seed: int = 0, max_workers: int = 1, progress: bool = False,
                      clean: Optional[np.ndarray] = None) -> List[Optional[float]]:
    """Per-example minimum budgets (None where the attack fails at eps_max)."""
    tol = default_tol(spec.norm) if tol is None else tol
    clean = clean_predictions(model, dataset, seed) if clean is None else clean
    goals = goal_labels(dataset, spec)
    sources = target_sources(dataset, clean) if spec.targeted else {}
    optimized = getattr(attack_family, "optimized", False)

    def search(i: int) -> Optional[float]:
        ex = dataset[i]
        goal = int(goals[i])
        attack_seed = example_seed(seed, i)

        def generate(eps: float) -> AttackOutcome:
            return attack_family.run(model, ex.x, spec.with_eps(eps), goal, seed=attack_seed,
                                     source=sources.get(goal))

        probe = SuccessProbe(model, ex.x, goal, spec, seed, i, int(clean[i]), generate, optimized)
        return _threshold_of(probe, eps_max, tol)

    return _map_examples(search, len(dataset), max_workers, progress,
                         desc=f"{getattr(attack_family, 'name', 'attack')} search")


def pointwise_points(attack_family, model, dataset: Dataset, spec: ThreatSpec, eps_grid: Sequence[float],
                     seed: int = 0, max_workers: int = 1, progress: bool = False,
                     clean: Optional[np.ndarray] = None) -> List[CurvePoint]:
    """Budget-curve points from one full evaluation per grid value."""
    clean = clean_predictions(model, dataset, seed) if clean is None else clean
    correct = clean == dataset.labels
    points = []
    for eps in _check_grid(eps_grid, "eps_grid"):
        if eps == 0:
            adversarial = clean
        else:
            adversarial = evaluate_attack(model, attack_family, dataset, spec.with_eps(eps), seed, max_workers,
                                          progress, clean).adversarial
        goals = goal_labels(dataset, spec)
        hit = adversarial == goals if spec.targeted else adversarial != dataset.labels
        points.append((float(eps),) + rates(correct, hit, adversarial == dataset.labels, spec.targeted))
    return points


def budget_curve_with_thresholds(attack_family, model, dataset: Dataset, spec: ThreatSpec,
                                 eps_grid: Sequence[float], seed: int = 0, method: str = "threshold",
                                 tol: Optional[float] = None, eps_max: Optional[float] = None,
                                 max_workers: int = 1, progress: bool = False
                                 ) -> Tuple[RobustnessCurve, Optional[List[Optional[float]]]]:
    """curve_budget that also returns the per-example minimum budgets (threshold method only)."""
    grid = _check_grid(eps_grid, "eps_grid")
    clean = clean_predictions(model, dataset, seed)
    correct = clean == dataset.labels
    meta = _metadata(attack_family, model, dataset, spec, seed, correct)
    logger.info(f"Budget curve: {meta['attack']} vs {meta['defense']} ({meta['norm']}, {meta['goal']}, "
                f"seed {seed}, {method})")

    if method == "threshold":
        eps_max = float(grid[-1]) if eps_max is None else eps_max
        thresholds = budget_thresholds(attack_family, model, dataset, spec, eps_max, tol, seed, max_workers,
                                       progress, clean)
        points = curve_from_thresholds(grid, thresholds, correct, spec.targeted)
    elif method == "pointwise":
        thresholds = None
        points = pointwise_points(attack_family, model, dataset, spec, grid, seed, max_workers, progress, clean)
    else:
        raise InvalidInputError(f"Unknown budget curve method '{method}' (expected threshold or pointwise)")
    return RobustnessCurve("budget", points, construction=method, **meta), thresholds


def curve_budget(attack_family, model, dataset: Dataset, spec: ThreatSpec, eps_grid: Sequence[float],
                 seed: int = 0, method: str = "threshold", tol: Optional[float] = None,
                 eps_max: Optional[float] = None, max_workers: int = 1, progress: bool = False) -> RobustnessCurve:
    """
    Accuracy and ASR against perturbation budget.

    The "threshold" method finds each example's minimum budget once (binary
    search for constrained attacks, the attack's own perturbation for
    minimum-perturbation attacks) and counts it against every grid value,
    so the accuracy is non-increasing. "pointwise" reruns the attack at
    every grid value.

    Args:
        attack_family: Configured attack
        model: Victim
        dataset: Evaluation set
        spec: Threat spec (its eps is ignored)
        eps_grid: Strictly increasing budgets
        seed: Run seed
        method: "threshold" or "pointwise"
        tol: Search resolution for the threshold method
        eps_max: Search bracket (defaults to the last grid value)
        max_workers: Examples evaluated concurrently
        progress: Show a progress bar

    Returns:
        RobustnessCurve of kind "budget"
    """
    curve, _ = budget_curve_with_thresholds(attack_family, model, dataset, spec, eps_grid, seed, method, tol,
                                            eps_max, max_workers, progress)
    return curve


# ---------------------------------------------------------------------------
# Strength curves
# ---------------------------------------------------------------------------

def curve_strength(attack_family, model, dataset: Dataset, spec: ThreatSpec, strength_grid: Sequence[int],
                   seed: int = 0, max_workers: int = 1, progress: bool = False
                   ) -> RobustnessCurve:
    """
    Accuracy and ASR at a fixed budget against iterations or queries.

    Checkpointable attacks run once per example with snapshots at every grid
    strength; the others (C&W) rerun with the strength as their iteration
    count. Strength 0 is the clean input.

    Raises:
        InvalidInputError: On a non-increasing grid or query strengths above the cap
    """
    grid = [int(s) for s in _check_grid(strength_grid, "strength_grid")]
    if getattr(attack_family, "strength_unit", "iterations") == "queries" and grid[-1] > DEFAULT_QUERY_CAP:
        raise InvalidInputError(f"Query strengths must not exceed {DEFAULT_QUERY_CAP}, got {grid[-1]}")
    clean = clean_predictions(model, dataset, seed)
    correct = clean == dataset.labels
    goals = goal_labels(dataset, spec)
    sources = target_sources(dataset, clean) if spec.targeted else {}
    optimized = getattr(attack_family, "optimized", False)
    checkpointable = getattr(attack_family, "checkpointable", True)
    active = [s for s in grid if s > 0]
    meta = _metadata(attack_family, model, dataset, spec, seed, correct)
    logger.info(f"Strength curve: {meta['attack']} vs {meta['defense']} at eps={spec.eps} "
                f"({meta['norm']}, {meta['goal']}, seed {seed})")

    def run_one(i: int) -> List[int]:
        ex = dataset[i]
        goal = int(goals[i])
        attack_seed = example_seed(seed, i)
        probe = SuccessProbe(model, ex.x, goal, spec, seed, i, int(clean[i]), None, optimized)
        if not active:
            return [int(clean[i])] * len(grid)
        if checkpointable:
            outcome = attack_family.run(model, ex.x, spec, goal, seed=attack_seed, checkpoints=grid,
                                        strength=active[-1], source=sources.get(goal))
            iterates = {s: outcome.snapshots[s] for s in active}
        else:
            iterates = {s: attack_family.run(model, ex.x, spec, goal, seed=attack_seed, strength=s,
                                             source=sources.get(goal)).x_adv for s in active}
        predictions = []
        for s in grid:
            if s == 0:
                predictions.append(int(clean[i]))
                continue
            snapshot = iterates[s]
            predictions.append(probe.predict(AttackOutcome(snapshot, False, dist(snapshot, ex.x, spec.norm)),
                                             spec.eps))
        return predictions

    per_example = np.array(_map_examples(run_one, len(dataset), max_workers, progress,
                                         desc=f"{meta['attack']} strength"), dtype=np.int64)
    points = []
    for column, s in enumerate(grid):
        adversarial = per_example[:, column]
        hit = adversarial == goals if spec.targeted else adversarial != dataset.labels
        points.append((float(s),) + rates(correct, hit, adversarial == dataset.labels, spec.targeted))
    return RobustnessCurve("strength", points, construction="checkpoint" if checkpointable else "rerun",
                           extra={"eps": spec.eps, "unit": getattr(attack_family, "strength_unit", "iterations")},
                           **meta)


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

def median_min_perturbation(outcomes: Sequence) -> float:
    """
    Median minimum perturbation; failures count as +inf.

    Accepts AttackOutcomes (their eps_star) or plain values (None for a
    failure). For an even count the two middle values are averaged when both
    are finite; otherwise the median is +inf.

    Raises:
        InvalidInputError: If outcomes is empty
    """
    if len(outcomes) == 0:
        raise InvalidInputError("median_min_perturbation needs at least one outcome")
    values = []
    for item in outcomes:
        value = item.eps_star if isinstance(item, AttackOutcome) else item
        values.append(np.inf if value is None else float(value))
    values.sort()
    middle = len(values) // 2
    if len(values) % 2:
        return values[middle]
    low, high = values[middle - 1], values[middle]
    if np.isinf(low) or np.isinf(high):
        return float("inf")
    return (low + high) / 2.0


def curve_area(curve: RobustnessCurve, metric: str = "accuracy") -> float:
    """Trapezoidal area under the accuracy (or ASR) curve."""
    if len(curve.points) < 2:
        return 0.0
    if metric == "accuracy":
        ys = curve.accuracies
    else:
        ys = np.array([0.0 if a is None else a for a in curve.asrs])
    return float(trapezoid(ys, curve.abscissae))


def accuracy_at(curve: RobustnessCurve, eps: float) -> float:
    """Accuracy at the largest abscissa not above eps."""
    xs = curve.abscissae
    eligible = np.nonzero(xs <= eps + FEASIBILITY_TOL)[0]
    if len(eligible) == 0:
        raise InvalidInputError(f"No curve point at or below {eps} (curve starts at {xs[0]})")
    return float(curve.points[int(eligible[-1])][1])
