"""
Threat models: norms, distances, projections and the ThreatSpec.

Every attack and every evaluation takes a ThreatSpec describing the norm,
the adversary's goal, the perturbation budget and the valid pixel box.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Tuple, Union

import numpy as np

from errors import InvalidInputError

logger = logging.getLogger(__name__)

# Slack on constraint checks to absorb floating point rounding
FEASIBILITY_TOL = 1e-12


class Norm(str, Enum):
    LINF = "linf"
    L2 = "l2"


class Goal(str, Enum):
    UNTARGETED = "untargeted"
    TARGETED = "targeted"


@dataclass(frozen=True)
class ThreatSpec:
    """Norm, goal, budget and pixel box of one evaluation."""
    norm: Norm
    goal: Goal = Goal.UNTARGETED
    eps: float = 0.0
    box: Tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "norm", Norm(self.norm))
        object.__setattr__(self, "goal", Goal(self.goal))
        object.__setattr__(self, "eps", float(self.eps))
        object.__setattr__(self, "box", (float(self.box[0]), float(self.box[1])))
        if not self.eps >= 0:
            raise InvalidInputError(f"Perturbation budget must be >= 0, got {self.eps}")
        if self.box[0] >= self.box[1]:
            raise InvalidInputError(f"Invalid pixel box {self.box}")

    @property
    def targeted(self) -> bool:
        return self.goal is Goal.TARGETED

    def with_eps(self, eps: float) -> "ThreatSpec":
        return dataclasses.replace(self, eps=eps)

    def to_dict(self) -> dict:
        return {"norm": self.norm.value, "goal": self.goal.value, "eps": self.eps, "box": list(self.box)}


def dist(a, b, norm: Union[Norm, str]) -> float:
    """
    Distance between two tensors.

    Args:
        a, b: Tensors of the same shape
        norm: "linf", "l2" or "l2_normalized" (l2 divided by sqrt(d))

    Returns:
        Distance as a float
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"Shape mismatch: {a.shape} vs {b.shape}")
    diff = (a - b).ravel()
    norm = norm.value if isinstance(norm, Norm) else norm
    if norm == "linf":
        return float(np.max(np.abs(diff))) if diff.size else 0.0
    if norm == "l2":
        return float(np.linalg.norm(diff))
    if norm == "l2_normalized":
        return float(np.linalg.norm(diff) / math.sqrt(diff.size))
    raise InvalidInputError(f"Unknown norm '{norm}'")


def eps_from_normalized_l2(eps_bar: float, dim: int) -> float:
    """Convert a normalized l2 budget (l2 / sqrt(d)) into a plain l2 budget."""
    return eps_bar * math.sqrt(dim)


def clip_box(x, spec: ThreatSpec) -> np.ndarray:
    return np.clip(x, spec.box[0], spec.box[1])


def is_feasible(x_adv, x, spec: ThreatSpec) -> bool:
    x_adv = np.asarray(x_adv)
    in_box = np.all(x_adv >= spec.box[0]) and np.all(x_adv <= spec.box[1])
    return bool(in_box and dist(x_adv, x, spec.norm) <= spec.eps + FEASIBILITY_TOL)


def project(x_adv, x, spec: ThreatSpec) -> np.ndarray:
    """
    Project onto the eps-ball around x intersected with the pixel box.

    For l2 the perturbation is rescaled radially first and then clamped to
    the box; clamping can only shrink the l2 norm, so both constraints hold.

    Args:
        x_adv: Candidate adversarial input
        x: Clean input
        spec: Threat specification

    Returns:
        Feasible tensor (x_adv itself, copied, when already feasible)
    """
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_adv.shape != x.shape:
        raise InvalidInputError(f"Shape mismatch: {x_adv.shape} vs {x.shape}")
    if is_feasible(x_adv, x, spec):
        return x_adv.copy()

    delta = x_adv - x
    if spec.norm is Norm.LINF:
        delta = np.clip(delta, -spec.eps, spec.eps)
    else:
        length = np.linalg.norm(delta)
        if length > spec.eps:
            delta = delta * (spec.eps / length)
    return clip_box(x + delta, spec)


def normalized_direction(grad: np.ndarray, norm: Union[Norm, str]) -> np.ndarray:
    """
    Steepest-ascent unit direction for a gradient: sign for linf, g/||g||_2 for l2.

    A zero gradient gives the zero direction.
    """
    norm = Norm(norm)
    if norm is Norm.LINF:
        return np.sign(grad)
    length = np.linalg.norm(grad)
    if length == 0:
        return np.zeros_like(grad)
    return grad / length


def random_in_ball(rng: np.random.Generator, shape, spec: ThreatSpec) -> np.ndarray:
    """Uniform sample from the eps-ball (not clamped to the box)."""
    if spec.norm is Norm.LINF:
        return rng.uniform(-spec.eps, spec.eps, size=shape)
    direction = rng.standard_normal(size=shape)
    direction /= max(np.linalg.norm(direction), 1e-300)
    dim = int(np.prod(shape))
    radius = spec.eps * rng.uniform() ** (1.0 / dim)
    return direction * radius
