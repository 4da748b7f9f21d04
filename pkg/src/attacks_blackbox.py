"""
Query-based attacks.

Score-based (observe log-probabilities): NES, SPSA, ZOO, N-ATTACK.
Decision-based (observe only the predicted label): Boundary, Evolutionary.

Every attack talks to the victim exclusively through a QueryOracle, which
charges exactly one query per evaluated input and stops the attack once its
cap is reached. Running out of queries never raises out of an attack: it
ends the run and the outcome reports queries_used == cap.
"""

import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.ndimage import zoom

from attacks_whitebox import AttackOutcome, StrengthRecorder, ascent_sign, is_success, make_outcome
from errors import InvalidInputError, PartialEstimateError, QueryBudgetExhausted
from tensor_core import as_tensor, logit_losses
from threat import Norm, ThreatSpec, clip_box, normalized_direction, project

logger = logging.getLogger(__name__)

DEFAULT_QUERY_CAP = 20000

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class QueryOracle:
    """Counted query access to a victim, in scores or labels mode."""

    MODES = ("scores", "labels")

    def __init__(self, model, mode: str = "scores", cap: int = DEFAULT_QUERY_CAP, seed: int = 0):
        """
        Initialize oracle.

        Args:
            model: Classifier or DefendedModel (shared, never mutated)
            mode: "scores" exposes log-probabilities, "labels" only argmax labels
            cap: Maximum number of queries
            seed: Seed for the victim's randomness (randomized defenses)
        """
        if mode not in self.MODES:
            raise InvalidInputError(f"Unknown oracle mode '{mode}' (expected one of {self.MODES})")
        if cap < 0:
            raise InvalidInputError(f"Query cap must be >= 0, got {cap}")
        self.model = model
        self.mode = mode
        self.cap = int(cap)
        self.count = 0
        self.rng = np.random.default_rng(seed)

    @property
    def remaining(self) -> int:
        return self.cap - self.count

    @property
    def input_shape(self):
        return self.model.input_shape

    def _charge(self, n: int):
        if self.count + n > self.cap:
            self.count = self.cap
            raise QueryBudgetExhausted(self.cap)
        self.count += n

    def _log_probabilities(self, batch) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        self._charge(len(batch))
        return self.model.log_probabilities(batch, self.rng)

    def scores(self, batch) -> np.ndarray:
        """(N, L) log-probabilities; costs N queries."""
        if self.mode != "scores":
            raise InvalidInputError("Labels-mode oracle does not expose scores")
        return self._log_probabilities(batch)

    def labels(self, batch) -> np.ndarray:
        """(N,) predicted labels; costs N queries."""
        return np.argmax(self._log_probabilities(batch), axis=1)

    def predict(self, x) -> int:
        return int(self.labels(np.asarray(x)[None])[0])


@dataclass(frozen=True)
class GradEstimate:
    grad: np.ndarray
    samples: int
    sigma: float


Sampler = Callable[[np.random.Generator, Tuple[int, ...]], np.ndarray]


def gaussian_directions(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def rademacher_directions(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


SAMPLERS = {"nes": gaussian_directions, "spsa": rademacher_directions}


def margins_from_scores(scores: np.ndarray, label: int) -> np.ndarray:
    """Z_label - max_{i != label} Z_i per row; log-probabilities give the logit margin."""
    values, _ = logit_losses(scores, np.full(len(scores), label), "margin")
    return values


def estimate_gradient(oracle: QueryOracle, x: np.ndarray, y: int, sigma: float, q: int,
                      rng: np.random.Generator, sampler: Sampler) -> GradEstimate:
    """
    Antithetic estimate (1/q) sum [(J(x + s u_i) - J(x - s u_i)) / 2s] u_i of the margin J.

    Query points are not clipped to the box. Consumes exactly 2q queries.

    Raises:
        PartialEstimateError: If the oracle runs out of queries mid-estimate
    """
    if q < 1 or sigma <= 0:
        raise InvalidInputError(f"Need q >= 1 and sigma > 0, got q={q}, sigma={sigma}")
    directions = sampler(rng, (q,) + x.shape)
    points = np.concatenate([x + sigma * directions, x - sigma * directions])
    available = oracle.remaining
    try:
        scores = oracle.scores(points)
    except QueryBudgetExhausted:
        raise PartialEstimateError(available, 2 * q)
    values = margins_from_scores(scores, y)
    slopes = (values[:q] - values[q:]) / (2.0 * sigma)
    grad = np.tensordot(slopes, directions, axes=1) / q
    return GradEstimate(grad, q, sigma)


def nes_grad(oracle: QueryOracle, x, y: int, sigma: float = 0.001, q: int = 100, seed: int = 0) -> GradEstimate:
    """Gradient estimate of the margin loss with Gaussian directions."""
    return estimate_gradient(oracle, as_tensor(x), y, sigma, q, np.random.default_rng(seed), gaussian_directions)


def spsa_grad(oracle: QueryOracle, x, y: int, sigma: float = 0.001, q: int = 100, seed: int = 0) -> GradEstimate:
    """Gradient estimate of the margin loss with Rademacher directions."""
    return estimate_gradient(oracle, as_tensor(x), y, sigma, q, np.random.default_rng(seed), rademacher_directions)


def score_attack(oracle: QueryOracle, x, spec: ThreatSpec, goal_label: int, estimator: str = "nes",
                 iters: Optional[int] = None, alpha: Optional[float] = None, sigma: float = 0.001,
                 q: int = 100, seed: int = 0, checkpoints=None) -> AttackOutcome:
    """
    BIM update driven by NES or SPSA gradient estimates of the margin loss.

    Each iteration spends 2q queries on the estimate and one on checking the
    new iterate; the initial check of x costs one query. Runs until success,
    `iters` iterations, or budget exhaustion.

    Args:
        oracle: Scores-mode QueryOracle
        x: Clean input
        spec: Threat spec
        goal_label: y (untargeted) or y* (targeted)
        estimator: "nes" or "spsa"
        iters: Iteration cap (None runs until the query budget is spent)
        alpha: Step size (default 0.15 * eps)
        sigma: Smoothing of the estimator
        q: Antithetic pairs per estimate
        seed: Sampling seed
        checkpoints: Query counts at which to keep the current iterate

    Returns:
        AttackOutcome with queries_used equal to the oracle counter
    """
    if estimator not in SAMPLERS:
        raise InvalidInputError(f"Unknown estimator '{estimator}' (expected one of {sorted(SAMPLERS)})")
    x = as_tensor(x, oracle.input_shape)
    rng = np.random.default_rng(seed)
    alpha = 0.15 * spec.eps if alpha is None else alpha
    sign = ascent_sign(spec, "margin")
    recorder = StrengthRecorder(checkpoints, x)

    verified = x.copy()
    success = False
    iterations = 0
    try:
        success = is_success(oracle.predict(x), goal_label, spec)
        recorder.record(oracle.count, x)
        while not success and spec.eps > 0 and (iters is None or iterations < iters):
            estimate = estimate_gradient(oracle, verified, goal_label, sigma, q, rng, SAMPLERS[estimator])
            candidate = project(verified + sign * alpha * normalized_direction(estimate.grad, spec.norm), x, spec)
            iterations += 1
            success = is_success(oracle.predict(candidate), goal_label, spec)
            verified = candidate
            recorder.record(oracle.count, verified)
    except (QueryBudgetExhausted, PartialEstimateError) as e:
        logger.debug(f"{estimator.upper()} stopped after {iterations} iterations: {e}")
        success = False

    return make_outcome(verified, x, spec, success, iterations=iterations, queries=oracle.count, recorder=recorder)


# ---------------------------------------------------------------------------
# ZOO
# ---------------------------------------------------------------------------

def zoo_coordinate_grad(objective: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                        coord: int, sigma: float = 1e-4) -> float:
    """Symmetric difference (f(x + s e_i) - f(x - s e_i)) / 2s along one coordinate."""
    offset = np.zeros_like(x)
    offset.flat[coord] = sigma
    values = objective(np.stack([x + offset, x - offset]))
    return float((values[0] - values[1]) / (2.0 * sigma))


def sample_coordinates(rng: np.random.Generator, dim: int, count: int) -> np.ndarray:
    return rng.integers(0, dim, size=count)


def _hinge(margins: np.ndarray, targeted: bool) -> np.ndarray:
    return np.maximum(-margins if targeted else margins, 0.0)


def zoo(oracle: QueryOracle, x, spec: ThreatSpec, goal_label: int, sigma: float = 1e-4,
        iters: Optional[int] = None, step: float = 0.01, c: float = 10.0, seed: int = 0,
        checkpoints=None) -> AttackOutcome:
    """
    Zeroth-order coordinate Adam on the C&W objective ||x' - x||^2 + c * hinge(x').

    Each step estimates one randomly sampled coordinate derivative from two
    queries. Among all queried points the closest adversarial one inside the
    box is kept and returned.
    """
    if spec.norm is not Norm.L2:
        raise InvalidInputError("ZOO is an l2 attack")
    x = as_tensor(x, oracle.input_shape)
    rng = np.random.default_rng(seed)
    recorder = StrengthRecorder(checkpoints, x)
    lo, hi = spec.box

    best, best_norm = None, np.inf
    iterations = 0

    def objective(points: np.ndarray) -> np.ndarray:
        nonlocal best, best_norm
        scores = oracle.scores(points)
        margins = margins_from_scores(scores, goal_label)
        sq_dist = np.sum((points - x).reshape(len(points), -1) ** 2, axis=1)
        predicted = np.argmax(scores, axis=1)
        for point, label, d2 in zip(points, predicted, sq_dist):
            inside = np.all(point >= lo) and np.all(point <= hi)
            if inside and is_success(int(label), goal_label, spec) and np.sqrt(d2) < best_norm:
                best, best_norm = point.copy(), float(np.sqrt(d2))
        return sq_dist + c * _hinge(margins, spec.targeted)

    try:
        if is_success(oracle.predict(x), goal_label, spec):
            return AttackOutcome(x.copy(), True, 0.0, queries_used=oracle.count, eps_star=0.0,
                                 snapshots=recorder.finish())
        recorder.record(oracle.count, x)

        current = x.copy()
        m = np.zeros(x.size)
        v = np.zeros(x.size)
        steps_taken = np.zeros(x.size)
        beta1, beta2 = ADAM_BETAS
        while iters is None or iterations < iters:
            coord = int(sample_coordinates(rng, x.size, 1)[0])
            g = zoo_coordinate_grad(objective, current, coord, sigma)
            iterations += 1
            steps_taken[coord] += 1
            t = steps_taken[coord]
            m[coord] = beta1 * m[coord] + (1 - beta1) * g
            v[coord] = beta2 * v[coord] + (1 - beta2) * g * g
            m_hat = m[coord] / (1 - beta1 ** t)
            v_hat = v[coord] / (1 - beta2 ** t)
            current.flat[coord] = np.clip(current.flat[coord] - step * m_hat / (np.sqrt(v_hat) + ADAM_EPS), lo, hi)
            recorder.record(oracle.count, best if best is not None else x)
    except QueryBudgetExhausted:
        logger.debug(f"ZOO stopped after {iterations} coordinate steps (budget exhausted)")

    if best is None:
        return make_outcome(x.copy(), x, spec, False, iterations=iterations, queries=oracle.count,
                            optimized=True, recorder=recorder)
    return make_outcome(best, x, spec, True, iterations=iterations, queries=oracle.count,
                        optimized=True, recorder=recorder)


# ---------------------------------------------------------------------------
# N-ATTACK
# ---------------------------------------------------------------------------

def squash(z: np.ndarray, spec: ThreatSpec) -> np.ndarray:
    """
    Map unbounded rows of z into the open eps-ball: eps * tanh(z) for linf,
    radial eps * tanh(||z||) * z / ||z|| for l2.
    """
    if spec.norm is Norm.LINF:
        return spec.eps * np.tanh(z)
    flat = z.reshape(len(z), -1)
    lengths = np.linalg.norm(flat, axis=1, keepdims=True)
    safe = np.where(lengths > 0, lengths, 1.0)
    return (spec.eps * np.tanh(lengths) * flat / safe).reshape(z.shape)


def nattack(oracle: QueryOracle, x, spec: ThreatSpec, goal_label: int, var: float = 0.1, lr: float = 0.02,
            samples: int = 100, iters: Optional[int] = None, seed: int = 0, checkpoints=None) -> AttackOutcome:
    """
    Learn a Gaussian over an unbounded space whose squashed samples are adversarial.

    Each iteration queries `samples` perturbed inputs (one query each),
    returns the closest adversarial sample if any, and otherwise moves the
    mean along the normalized-fitness estimator of the hinge loss.
    """
    if samples < 2:
        raise InvalidInputError(f"samples must be >= 2, got {samples}")
    x = as_tensor(x, oracle.input_shape)
    rng = np.random.default_rng(seed)
    recorder = StrengthRecorder(checkpoints, x)
    mean = np.zeros_like(x)
    found = None
    iterations = 0

    try:
        if is_success(oracle.predict(x), goal_label, spec):
            return make_outcome(x.copy(), x, spec, True, queries=oracle.count, recorder=recorder)
        recorder.record(oracle.count, x)

        while spec.eps > 0 and (iters is None or iterations < iters):
            noise = rng.standard_normal((samples,) + x.shape)
            candidates = clip_box(x + squash(mean + var * noise, spec), spec)
            scores = oracle.scores(candidates)
            iterations += 1

            predicted = np.argmax(scores, axis=1)
            hits = [i for i in range(samples) if is_success(int(predicted[i]), goal_label, spec)]
            if hits:
                distances = [np.linalg.norm((candidates[i] - x).ravel()) for i in hits]
                found = candidates[hits[int(np.argmin(distances))]]
                recorder.record(oracle.count, found)
                break

            fitness = -_hinge(margins_from_scores(scores, goal_label), spec.targeted)
            normalized = (fitness - fitness.mean()) / (fitness.std() + 1e-7)
            mean = mean + lr / (samples * var) * np.tensordot(normalized, noise, axes=1)
            recorder.record(oracle.count, clip_box(x + squash(mean[None], spec)[0], spec))
    except QueryBudgetExhausted:
        logger.debug(f"N-ATTACK stopped after {iterations} iterations (budget exhausted)")

    if found is None:
        return make_outcome(x.copy(), x, spec, False, iterations=iterations, queries=oracle.count, recorder=recorder)
    return make_outcome(found, x, spec, True, iterations=iterations, queries=oracle.count, recorder=recorder)


# ---------------------------------------------------------------------------
# Decision-based attacks
# ---------------------------------------------------------------------------

def _initial_adversarial(oracle: QueryOracle, x: np.ndarray, spec: ThreatSpec, goal_label: int,
                         rng: np.random.Generator, starting_point, init_draws: int) -> Optional[np.ndarray]:
    if starting_point is not None:
        start = clip_box(as_tensor(starting_point, x.shape), spec)
        return start if is_success(oracle.predict(start), goal_label, spec) else None
    if spec.targeted:
        logger.warning("Targeted decision-based attack needs a starting point classified as the target")
        return None
    for _ in range(init_draws):
        candidate = rng.uniform(spec.box[0], spec.box[1], size=x.shape)
        if is_success(oracle.predict(candidate), goal_label, spec):
            return candidate
    return None


def _search_towards(oracle: QueryOracle, x: np.ndarray, adversarial: np.ndarray, spec: ThreatSpec,
                    goal_label: int, steps: int = 10) -> np.ndarray:
    """Binary search on the segment from x to an adversarial point for the closest adversarial blend."""
    lo, hi = 0.0, 1.0
    for _ in range(steps):
        mid = (lo + hi) / 2.0
        if is_success(oracle.predict(x + mid * (adversarial - x)), goal_label, spec):
            hi = mid
        else:
            lo = mid
    return x + hi * (adversarial - x)


def _l2(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm((a - b).ravel()))


class BoundaryProposal:
    """Orthogonal step plus a step towards x, with step sizes adapted to the acceptance rate."""

    def __init__(self, spec: ThreatSpec, spherical_step: float = 0.01, source_step: float = 0.01,
                 adaptation: float = 1.1, window: int = 10):
        self.spec = spec
        self.spherical_step = spherical_step
        self.source_step = source_step
        self.adaptation = adaptation
        self.window = window
        self.trials = []

    def propose(self, rng: np.random.Generator, x: np.ndarray, current: np.ndarray) -> np.ndarray:
        source = x.ravel()
        diff = source - current.ravel()
        d = np.linalg.norm(diff)
        eta = rng.standard_normal(diff.shape)
        eta -= (eta @ diff) / (d * d) * diff
        eta *= self.spherical_step * d / max(np.linalg.norm(eta), 1e-300)
        # back onto the sphere of radius d around x, then towards x
        on_sphere = current.ravel() + eta
        on_sphere = source - (source - on_sphere) * (d / np.linalg.norm(source - on_sphere))
        candidate = on_sphere + self.source_step * (source - on_sphere)
        return clip_box(candidate.reshape(x.shape), self.spec)

    def feedback(self, accepted: bool):
        self.trials.append(accepted)
        if len(self.trials) < self.window:
            return
        rate = float(np.mean(self.trials))
        if rate > 0.5:
            self.spherical_step = min(self.spherical_step * self.adaptation, 1.0)
            self.source_step = min(self.source_step * self.adaptation, 0.5)
        elif rate < 0.25:
            self.spherical_step = max(self.spherical_step / self.adaptation, 1e-6)
            self.source_step = max(self.source_step / self.adaptation, 1e-6)
        self.trials = []


class EvolutionProposal:
    """
    (1+1) evolution strategy in a reduced search space with a diagonal
    covariance adapted along the evolution path of accepted steps.
    """

    def __init__(self, spec: ThreatSpec, input_shape, reduction: int = 2, mu: float = 0.01,
                 sigma_scale: float = 0.01, cc: float = 0.01, ccov: float = 0.001, window: int = 30,
                 update_every: int = 10):
        self.spec = spec
        self.input_shape = tuple(input_shape)
        self.reduced_shape = self._reduced_shape(self.input_shape, reduction)
        self.mu = mu
        self.sigma_scale = sigma_scale
        self.cc = cc
        self.ccov = ccov
        self.update_every = update_every
        self.covariance = np.ones(self.reduced_shape)
        self.path = np.zeros(self.reduced_shape)
        self.successes = deque(maxlen=window)
        self.trials = 0
        self._last = None

    @staticmethod
    def _reduced_shape(shape, reduction: int):
        if len(shape) == 3 and reduction > 1 and min(shape[1:]) >= 2 * reduction:
            c, h, w = shape
            return (c, -(-h // reduction), -(-w // reduction))
        return tuple(shape)

    def _upsample(self, z: np.ndarray) -> np.ndarray:
        if self.reduced_shape == self.input_shape:
            return z
        factors = [full / small for full, small in zip(self.input_shape, self.reduced_shape)]
        return zoom(z, factors, order=1)

    def propose(self, rng: np.random.Generator, x: np.ndarray, current: np.ndarray) -> np.ndarray:
        sigma = self.sigma_scale * _l2(current, x)
        z = sigma * np.sqrt(self.covariance) * rng.standard_normal(self.reduced_shape)
        self._last = (z, sigma)
        candidate = current + self.mu * (x - current) + self._upsample(z)
        return clip_box(candidate, self.spec)

    def feedback(self, accepted: bool):
        z, sigma = self._last
        if accepted and sigma > 0:
            self.path = (1 - self.cc) * self.path + np.sqrt(self.cc * (2 - self.cc)) * z / sigma
            self.covariance = (1 - self.ccov) * self.covariance + self.ccov * self.path ** 2
        self.successes.append(accepted)
        self.trials += 1
        if self.trials % self.update_every == 0:
            rate = float(np.mean(self.successes))
            self.mu = float(np.clip(self.mu * np.exp(rate - 0.2), 1e-4, 0.5))


def _decision_attack(name: str, proposal, oracle: QueryOracle, x: np.ndarray, spec: ThreatSpec,
                     goal_label: int, rng: np.random.Generator, iters: Optional[int],
                     starting_point, init_draws: int, checkpoints) -> AttackOutcome:
    recorder = StrengthRecorder(checkpoints, x)
    history = []
    current = None
    iterations = 0

    try:
        if is_success(oracle.predict(x), goal_label, spec):
            return AttackOutcome(x.copy(), True, 0.0, queries_used=oracle.count, eps_star=0.0,
                                 snapshots=recorder.finish(), history=[0.0])
        start = _initial_adversarial(oracle, x, spec, goal_label, rng, starting_point, init_draws)
        if start is None:
            logger.info(f"{name}: no adversarial starting point found")
        else:
            current = _search_towards(oracle, x, start, spec, goal_label)
            best_dist = _l2(current, x)
            history.append(best_dist)
            recorder.record(oracle.count, current)

            while iters is None or iterations < iters:
                candidate = proposal.propose(rng, x, current)
                iterations += 1
                candidate_dist = _l2(candidate, x)
                adversarial = is_success(oracle.predict(candidate), goal_label, spec)
                accepted = adversarial and candidate_dist < best_dist
                if accepted:
                    current, best_dist = candidate, candidate_dist
                proposal.feedback(accepted)
                history.append(best_dist)
                recorder.record(oracle.count, current)
    except QueryBudgetExhausted:
        logger.debug(f"{name} stopped after {iterations} iterations (budget exhausted)")

    if current is None:
        return make_outcome(x.copy(), x, spec, False, queries=oracle.count, optimized=True,
                            recorder=recorder, history=history)
    return make_outcome(current, x, spec, True, iterations=iterations, queries=oracle.count,
                        optimized=True, recorder=recorder, history=history)


def boundary(oracle: QueryOracle, x, spec: ThreatSpec, goal_label: int, iters: Optional[int] = None,
             seed: int = 0, spherical_step: float = 0.01, source_step: float = 0.01,
             adaptation: float = 1.1, window: int = 10, starting_point=None, init_draws: int = 100,
             checkpoints=None) -> AttackOutcome:
    """
    Boundary attack: a random walk along the decision boundary towards x.

    Each proposal is an orthogonal step of relative size spherical_step
    followed by a step of relative size source_step towards x; it is kept
    only if it is adversarial and closer. Both step sizes grow by
    `adaptation` when more than half of the last `window` proposals were
    kept and shrink when fewer than a quarter were.

    Args:
        oracle: QueryOracle (labels mode suffices)
        x: Clean input
        spec: Threat spec (l2)
        goal_label: y (untargeted) or y* (targeted)
        iters: Proposal cap (None runs until the budget is spent)
        seed: Random seed
        starting_point: Adversarial start (required for targeted attacks)
        init_draws: Uniform draws tried for an untargeted start
        checkpoints: Query counts at which to keep the best iterate

    Returns:
        AttackOutcome whose history is the best-so-far l2 distance per step
    """
    if spec.norm is not Norm.L2:
        raise InvalidInputError("Boundary is an l2 attack")
    x = as_tensor(x, oracle.input_shape)
    proposal = BoundaryProposal(spec, spherical_step, source_step, adaptation, window)
    return _decision_attack("Boundary", proposal, oracle, x, spec, goal_label, np.random.default_rng(seed),
                            iters, starting_point, init_draws, checkpoints)


def evolutionary(oracle: QueryOracle, x, spec: ThreatSpec, goal_label: int, iters: Optional[int] = None,
                 seed: int = 0, reduction: int = 2, mu: float = 0.01, sigma_scale: float = 0.01,
                 starting_point=None, init_draws: int = 100, checkpoints=None) -> AttackOutcome:
    """
    Evolutionary attack: (1+1)-ES proposals x~ = x* + mu (x - x*) + z with
    z ~ N(0, sigma^2 C) drawn in a space downscaled by `reduction` for
    (C, H, W) inputs and upsampled bilinearly. sigma is 0.01 of the current
    distance and mu follows the recent success rate.
    """
    if spec.norm is not Norm.L2:
        raise InvalidInputError("Evolutionary is an l2 attack")
    x = as_tensor(x, oracle.input_shape)
    proposal = EvolutionProposal(spec, x.shape, reduction=reduction, mu=mu, sigma_scale=sigma_scale)
    return _decision_attack("Evolutionary", proposal, oracle, x, spec, goal_label,
                            np.random.default_rng(seed), iters, starting_point, init_draws, checkpoints)
