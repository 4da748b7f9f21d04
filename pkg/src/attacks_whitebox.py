"""
Gradient-based attacks: FGSM, BIM, MIM, DIM, DeepFool and C&W, plus the
gradient oracles they run against (plain, BPDA and EOT).

Conventions shared by every attack:
- `goal_label` is the true label y for untargeted attacks and the target y*
  for targeted ones.
- Untargeted attacks ascend the loss J(x, y); targeted attacks descend
  J(x, y*). For the margin loss the direction flips, since the margin
  decreases as the prediction moves away from its label.
- Attacks are pure functions of (model, x, spec, params, seed); randomized
  victims draw their randomness from the oracle's own seeded generator.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from defenses import Substitute, identity_substitute
from errors import InvalidInputError
from input_transforms import resize_pad, sample_resize_pad
from tensor_core import as_tensor, logit_losses
from threat import Norm, ThreatSpec, clip_box, dist, normalized_direction, project

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class AttackOutcome:
    """Result of one attack run on one example."""
    x_adv: np.ndarray
    success: bool
    pert_norm: float
    iterations_used: int = 0
    queries_used: int = 0
    eps_star: Optional[float] = None
    snapshots: Optional[Dict[int, np.ndarray]] = None
    history: Optional[List[float]] = None

    def to_dict(self) -> dict:
        return {
            "success": bool(self.success),
            "pert_norm": float(self.pert_norm),
            "iterations_used": int(self.iterations_used),
            "queries_used": int(self.queries_used),
            "eps_star": None if self.eps_star is None else float(self.eps_star),
        }


class StrengthRecorder:
    """
    Keeps the iterate an attack would have returned had it stopped at each
    checkpoint strength (iterations or queries).
    """

    def __init__(self, checkpoints: Optional[Iterable[int]], start: np.ndarray):
        self.checkpoints = sorted({int(c) for c in checkpoints}) if checkpoints is not None else []
        self.snapshots: Dict[int, np.ndarray] = {}
        self.last = np.array(start, dtype=np.float64)

    @property
    def active(self) -> bool:
        return bool(self.checkpoints)

    def record(self, strength: int, current: np.ndarray):
        """Register the iterate reached once `strength` units have been spent."""
        if not self.active:
            return
        for c in self.checkpoints:
            if c < strength and c not in self.snapshots:
                self.snapshots[c] = self.last
        self.last = np.array(current, dtype=np.float64)

    def finish(self) -> Optional[Dict[int, np.ndarray]]:
        if not self.active:
            return None
        for c in self.checkpoints:
            self.snapshots.setdefault(c, self.last)
        return dict(sorted(self.snapshots.items()))


def is_success(predicted: int, goal_label: int, spec: ThreatSpec) -> bool:
    return predicted == goal_label if spec.targeted else predicted != goal_label


def ascent_sign(spec: ThreatSpec, loss_kind: str = "xent") -> float:
    """+1 to ascend the loss, -1 to descend it."""
    sign = 1.0 if loss_kind == "xent" else -1.0
    return -sign if spec.targeted else sign


def make_outcome(x_adv: np.ndarray, x: np.ndarray, spec: ThreatSpec, success: bool, iterations: int = 0,
                 queries: int = 0, optimized: bool = False, recorder: Optional[StrengthRecorder] = None,
                 history: Optional[List[float]] = None) -> AttackOutcome:
    pert = dist(x_adv, x, spec.norm)
    eps_star = pert if (optimized and success) else None
    return AttackOutcome(
        x_adv=x_adv,
        success=bool(success),
        pert_norm=pert,
        iterations_used=iterations,
        queries_used=queries,
        eps_star=eps_star,
        snapshots=recorder.finish() if recorder is not None else None,
        history=history,
    )


# ---------------------------------------------------------------------------
# Gradient oracles
# ---------------------------------------------------------------------------

class GradOracle:
    """
    Differentiable view of a (possibly defended) model.

    The forward pass is always the victim's own forward (one randomness
    draw); BPDA replaces the backward of non-differentiable transforms and
    EOT averages gradients over k independent draws.
    """

    def __init__(self, model, k_samples: int = 1, seed: int = 0,
                 substitute: Optional[Substitute] = None):
        """
        Initialize oracle.

        Args:
            model: Classifier or DefendedModel
            k_samples: Randomness draws averaged per gradient (EOT)
            seed: Seed of the oracle's generator
            substitute: Backward map for non-differentiable stages (BPDA)
        """
        if k_samples < 1:
            raise InvalidInputError(f"k_samples must be >= 1, got {k_samples}")
        self.model = model
        self.k_samples = k_samples if model.is_random else 1
        self.substitute = substitute
        self.rng = np.random.default_rng(seed)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return self.model.input_shape

    @property
    def num_classes(self) -> int:
        return self.model.num_classes

    def forward(self, x) -> np.ndarray:
        return self.model.trace(x, self.rng, self.substitute).logits

    def predict(self, x) -> int:
        return self.model.predict_label(x, self.rng)

    def _traces(self, x):
        return [self.model.trace(x, self.rng, self.substitute) for _ in range(self.k_samples)]

    def loss_grad(self, x, label: int, loss_kind: str = "xent") -> Tuple[float, np.ndarray]:
        """Mean loss value and mean input gradient over the oracle's draws."""
        values, grads = [], []
        for tr in self._traces(x):
            value, dlogits = logit_losses(tr.logits[None], [label], loss_kind)
            values.append(value[0])
            grads.append(tr.backward(dlogits[0]))
        return float(np.mean(values)), np.mean(grads, axis=0)

    def logits_jacobian(self, x) -> Tuple[np.ndarray, np.ndarray]:
        """Mean logits (L,) and Jacobian (L,) + input_shape, one backward pass per class."""
        eye = np.eye(self.num_classes)
        logits, jacobians = [], []
        for tr in self._traces(x):
            logits.append(tr.logits)
            jacobians.append(np.stack([tr.backward(eye[k]) for k in range(self.num_classes)]))
        return np.mean(logits, axis=0), np.mean(jacobians, axis=0)


def as_grad_oracle(model_or_oracle, seed: int = 0) -> GradOracle:
    if isinstance(model_or_oracle, GradOracle):
        return model_or_oracle
    return GradOracle(model_or_oracle, seed=seed)


def wrap_bpda(defended_model, differentiable_substitute: Optional[Substitute] = None,
              seed: int = 0) -> GradOracle:
    """Forward through the defense, backward through the substitute (identity by default)."""
    return GradOracle(defended_model, seed=seed,
                      substitute=differentiable_substitute or identity_substitute)


def wrap_eot(random_defended_model, k_samples: int, seed: int,
             substitute: Optional[Substitute] = None) -> GradOracle:
    """Average gradients over k independent randomness draws."""
    return GradOracle(random_defended_model, k_samples=k_samples, seed=seed, substitute=substitute)


# ---------------------------------------------------------------------------
# Constrained attacks
# ---------------------------------------------------------------------------

def _prepare(oracle, x) -> Tuple[GradOracle, np.ndarray]:
    oracle = as_grad_oracle(oracle)
    return oracle, as_tensor(x, oracle.input_shape)


def fgsm(oracle, x, spec: ThreatSpec, goal_label: int, loss_kind: str = "xent") -> AttackOutcome:
    """
    Single step x + eps * direction(grad J), projected to the box.

    Args:
        oracle: GradOracle or model
        x: Clean input
        spec: Threat spec (linf uses the gradient sign, l2 the normalized gradient)
        goal_label: y (untargeted) or y* (targeted)
        loss_kind: "xent" or "margin"

    Returns:
        AttackOutcome with iterations_used = 1
    """
    oracle, x = _prepare(oracle, x)
    _, grad = oracle.loss_grad(x, goal_label, loss_kind)
    step = ascent_sign(spec, loss_kind) * spec.eps * normalized_direction(grad, spec.norm)
    x_adv = project(x + step, x, spec)
    success = is_success(oracle.predict(x_adv), goal_label, spec)
    return make_outcome(x_adv, x, spec, success, iterations=1)


def _momentum_iterations(oracle: GradOracle, x: np.ndarray, spec: ThreatSpec, goal_label: int,
                         iters: int, alpha: Optional[float], mu: Optional[float], loss_kind: str,
                         checkpoints, grad_fn) -> AttackOutcome:
    if iters < 1:
        raise InvalidInputError(f"iters must be >= 1, got {iters}")
    alpha = 0.15 * spec.eps if alpha is None else alpha
    if alpha <= 0 and spec.eps > 0:
        raise InvalidInputError(f"alpha must be > 0, got {alpha}")

    sign = ascent_sign(spec, loss_kind)
    recorder = StrengthRecorder(checkpoints, x)
    x_adv = clip_box(x, spec)
    accumulated = np.zeros_like(x)

    for t in range(1, iters + 1):
        grad = grad_fn(x_adv)
        if mu is None:
            direction_source = grad
        else:
            l1 = np.sum(np.abs(grad))
            accumulated = mu * accumulated + (grad / l1 if l1 > 0 else 0.0)
            direction_source = accumulated
        x_adv = project(x_adv + sign * alpha * normalized_direction(direction_source, spec.norm), x, spec)
        recorder.record(t, x_adv)

    success = is_success(oracle.predict(x_adv), goal_label, spec)
    return make_outcome(x_adv, x, spec, success, iterations=iters, recorder=recorder)


def bim(oracle, x, spec: ThreatSpec, goal_label: int, iters: int = 20, alpha: Optional[float] = None,
        loss_kind: str = "xent", checkpoints=None) -> AttackOutcome:
    """
    Iterated FGSM with step alpha (default 0.15 * eps), projected after every step.

    All iterations run; intermediate iterates are kept at the requested
    checkpoints for strength curves.
    """
    oracle, x = _prepare(oracle, x)
    return _momentum_iterations(oracle, x, spec, goal_label, iters, alpha, None, loss_kind, checkpoints,
                                lambda z: oracle.loss_grad(z, goal_label, loss_kind)[1])


def mim(oracle, x, spec: ThreatSpec, goal_label: int, iters: int = 20, alpha: Optional[float] = None,
        mu: float = 1.0, loss_kind: str = "xent", checkpoints=None) -> AttackOutcome:
    """BIM with the accumulator g <- mu * g + grad / ||grad||_1 (g starts at 0)."""
    oracle, x = _prepare(oracle, x)
    return _momentum_iterations(oracle, x, spec, goal_label, iters, alpha, mu, loss_kind, checkpoints,
                                lambda z: oracle.loss_grad(z, goal_label, loss_kind)[1])


def dim(oracle, x, spec: ThreatSpec, goal_label: int, iters: int = 20, alpha: Optional[float] = None,
        mu: float = 1.0, transform_prob: float = 0.5, min_ratio: float = 0.9, seed: int = 0,
        loss_kind: str = "xent", checkpoints=None) -> AttackOutcome:
    """
    MIM whose gradient is taken through a random resize-and-pad of the
    iterate with probability transform_prob.

    Requires a square (C, s, s) input; for s < 2 the transform is the identity.
    """
    oracle, x = _prepare(oracle, x)
    if x.ndim != 3 or x.shape[1] != x.shape[2]:
        raise InvalidInputError(f"DIM needs a square (C, s, s) input, got shape {x.shape}")
    size = x.shape[1]
    rng = np.random.default_rng(seed)

    def diverse_grad(z: np.ndarray) -> np.ndarray:
        if rng.uniform() < transform_prob and size >= 2:
            rnd, top, left = sample_resize_pad(rng, size, min_ratio)
            transformed, backward = resize_pad(z, rnd, top, left)
            return backward(oracle.loss_grad(transformed, goal_label, loss_kind)[1])
        return oracle.loss_grad(z, goal_label, loss_kind)[1]

    return _momentum_iterations(oracle, x, spec, goal_label, iters, alpha, mu, loss_kind, checkpoints,
                                diverse_grad)


# ---------------------------------------------------------------------------
# Minimum-perturbation attacks
# ---------------------------------------------------------------------------

def deepfool(oracle, x, spec: ThreatSpec, goal_label: int, max_iters: int = 100,
             overshoot: float = 0.02, checkpoints=None) -> AttackOutcome:
    """
    Iteratively step to the nearest linearized decision boundary.

    Each iteration picks the class k minimizing |f_k| / ||w_k||_* (dual norm:
    l1 for linf, l2 for l2) and takes the matching minimal step. The
    accumulated step is scaled by (1 + overshoot).

    Args:
        oracle: GradOracle or model
        x: Clean input
        spec: Threat spec (only the norm is used)
        goal_label: True label y
        max_iters: Iteration cap
        overshoot: Final scaling of the accumulated step

    Returns:
        AttackOutcome with eps_star set on success
    """
    if spec.targeted:
        raise InvalidInputError("DeepFool is untargeted only")
    oracle, x = _prepare(oracle, x)
    if oracle.predict(x) != goal_label:
        return AttackOutcome(x.copy(), True, 0.0, iterations_used=0, eps_star=0.0,
                             snapshots=StrengthRecorder(checkpoints, x).finish())

    recorder = StrengthRecorder(checkpoints, x)
    total_step = np.zeros_like(x)
    x_adv = x.copy()
    success = False
    iterations = 0

    for iterations in range(1, max_iters + 1):
        logits, jacobian = oracle.logits_jacobian(x_adv)
        w = jacobian - jacobian[goal_label]
        f = logits - logits[goal_label]
        flat = w.reshape(len(w), -1)
        dual = np.abs(flat).sum(axis=1) if spec.norm is Norm.LINF else np.linalg.norm(flat, axis=1)

        candidates = [k for k in range(len(f)) if k != goal_label and dual[k] > 0]
        if not candidates:
            logger.debug("DeepFool: all logit-difference gradients vanish, no linearized step")
            return make_outcome(x_adv, x, spec, False, iterations=iterations, optimized=True, recorder=recorder)

        k = min(candidates, key=lambda c: abs(f[c]) / dual[c])
        distance = abs(f[k]) / dual[k]
        if spec.norm is Norm.LINF:
            step = distance * np.sign(w[k])
        else:
            step = distance * w[k] / dual[k]
        total_step = total_step + step
        x_adv = clip_box(x + (1.0 + overshoot) * total_step, spec)
        recorder.record(iterations, x_adv)

        if oracle.predict(x_adv) != goal_label:
            success = True
            break

    return make_outcome(x_adv, x, spec, success, iterations=iterations, optimized=True, recorder=recorder)


def _to_tanh_space(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    scaled = np.clip(2.0 * (x - lo) / (hi - lo) - 1.0, -1.0 + 1e-6, 1.0 - 1e-6)
    return np.arctanh(scaled)


def _from_tanh_space(w: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return lo + (hi - lo) * (np.tanh(w) + 1.0) / 2.0


def cw(oracle, x, spec: ThreatSpec, goal_label: int, opt_iters: int = 100, c_search_steps: int = 6,
       initial_c: float = 1e-2, c_bounds: Tuple[float, float] = (1e-3, 1e6), lr: float = 0.01,
       optimizer: str = "gd", checkpoints=None) -> AttackOutcome:
    """
    C&W l2: minimize ||x' - x||_2^2 + c * hinge(x') in tanh space with a
    binary search over c.

    hinge is max(Z_y - max_{i!=y} Z_i, 0) untargeted and
    max(max_{i!=y*} Z_i - Z_{y*}, 0) targeted. Every c restarts from x.

    Args:
        oracle: GradOracle or model
        x: Clean input
        spec: Threat spec (norm must be l2)
        goal_label: y (untargeted) or y* (targeted)
        opt_iters: Optimizer iterations per c
        c_search_steps: Number of c values tried
        initial_c: First c
        c_bounds: Search bracket for c
        lr: Optimizer step size
        optimizer: "gd" (plain gradient descent) or "adam"
        checkpoints: Not supported (the c search is rerun per strength instead)

    Returns:
        Smallest successful perturbation over all c, or a failure outcome
    """
    if spec.norm is not Norm.L2:
        raise InvalidInputError("C&W is an l2 attack")
    if optimizer not in ("gd", "adam"):
        raise InvalidInputError(f"Unknown optimizer '{optimizer}'")
    oracle, x = _prepare(oracle, x)
    if is_success(oracle.predict(x), goal_label, spec):
        return AttackOutcome(x.copy(), True, 0.0, eps_star=0.0)

    lo, hi = spec.box
    w0 = _to_tanh_space(x, lo, hi)
    lower, upper = c_bounds
    found_upper = False
    c = initial_c
    best, best_norm = None, np.inf
    total_iters = 0
    beta1, beta2 = ADAM_BETAS

    for search_step in range(c_search_steps):
        w = w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        succeeded = False

        for t in range(1, opt_iters + 1):
            x_new = _from_tanh_space(w, lo, hi)
            margin, dmargin = oracle.loss_grad(x_new, goal_label, "margin")
            if spec.targeted:
                margin, dmargin = -margin, -dmargin
            dhinge = dmargin if margin > 0 else np.zeros_like(dmargin)

            if is_success(oracle.predict(x_new), goal_label, spec):
                succeeded = True
                norm = dist(x_new, x, Norm.L2)
                if norm < best_norm:
                    best, best_norm = x_new, norm

            grad_x = 2.0 * (x_new - x) + c * dhinge
            grad_w = grad_x * (hi - lo) * (1.0 - np.tanh(w) ** 2) / 2.0
            if optimizer == "adam":
                m = beta1 * m + (1 - beta1) * grad_w
                v = beta2 * v + (1 - beta2) * grad_w ** 2
                m_hat = m / (1 - beta1 ** t)
                v_hat = v / (1 - beta2 ** t)
                w = w - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
            else:
                w = w - lr * grad_w
        total_iters += opt_iters

        logger.debug(f"C&W search step {search_step}: c={c:.4g} success={succeeded} best={best_norm:.4g}")
        if succeeded:
            found_upper = True
            upper = min(upper, c)
            c = (lower + upper) / 2.0
        else:
            lower = max(lower, c)
            c = min(c * 10.0, c_bounds[1]) if not found_upper else (lower + upper) / 2.0

    if best is None:
        return make_outcome(x.copy(), x, spec, False, iterations=total_iters, optimized=True)
    return make_outcome(best, x, spec, True, iterations=total_iters, optimized=True)
