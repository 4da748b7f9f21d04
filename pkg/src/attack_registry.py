"""
Static registry of attack descriptors and the dispatch that runs them.

Each descriptor records the threat-model columns an attack supports
(knowledge, goals, capability, distances) plus how its strength is measured.
A configured attack (`AttackFamily`) pins one knowledge setting and a set of
parameter overrides on top of a descriptor and knows how to run itself
against a victim:

- white-box attacks get a GradOracle; against a defended victim the oracle
  is adaptive (BPDA through non-differentiable transforms, EOT over
  randomness) unless `adaptive: false` is configured
- transfer attacks run the same white-box code on a substitute model
- score-based attacks see the victim through a scores-mode QueryOracle
- decision-based attacks see it through a labels-mode QueryOracle
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

import attacks_blackbox
import attacks_whitebox
from attacks_blackbox import DEFAULT_QUERY_CAP, QueryOracle
from attacks_whitebox import AttackOutcome, GradOracle, is_success
from defenses import identity_substitute
from errors import ConfigError
from tensor_core import as_tensor
from threat import ThreatSpec

logger = logging.getLogger(__name__)

WHITE = "white"
TRANSFER = "transfer"
SCORE = "score"
DECISION = "decision"
KNOWLEDGE = (WHITE, TRANSFER, SCORE, DECISION)

BOTH_GOALS = ("untargeted", "targeted")
BOTH_NORMS = ("linf", "l2")

DEFAULT_EOT_SAMPLES = 10


@dataclass(frozen=True)
class AttackDescriptor:
    """One row of the compatibility matrix."""
    method: str
    knowledge: Tuple[str, ...]
    goals: Tuple[str, ...]
    capability: str
    distances: Tuple[str, ...]
    strength_unit: str
    checkpointable: bool
    strength_param: Optional[str]
    defaults: Dict[str, object] = field(default_factory=dict)

    @property
    def optimized(self) -> bool:
        return self.capability == "optimized"


DESCRIPTORS: Dict[str, AttackDescriptor] = {
    "identity": AttackDescriptor("identity", (WHITE, TRANSFER), BOTH_GOALS, "constrained", BOTH_NORMS,
                                 "iterations", True, None),
    "fgsm": AttackDescriptor("fgsm", (WHITE, TRANSFER), BOTH_GOALS, "constrained", BOTH_NORMS,
                             "iterations", True, None, {"loss_kind": "xent"}),
    "bim": AttackDescriptor("bim", (WHITE, TRANSFER), BOTH_GOALS, "constrained", BOTH_NORMS,
                            "iterations", True, "iters", {"iters": 20, "alpha": None, "loss_kind": "xent"}),
    "mim": AttackDescriptor("mim", (WHITE, TRANSFER), BOTH_GOALS, "constrained", BOTH_NORMS,
                            "iterations", True, "iters",
                            {"iters": 20, "alpha": None, "mu": 1.0, "loss_kind": "xent"}),
    "deepfool": AttackDescriptor("deepfool", (WHITE,), ("untargeted",), "optimized", BOTH_NORMS,
                                 "iterations", True, "max_iters", {"max_iters": 100, "overshoot": 0.02}),
    "cw": AttackDescriptor("cw", (WHITE,), BOTH_GOALS, "optimized", ("l2",),
                           "iterations", False, "opt_iters",
                           {"opt_iters": 100, "c_search_steps": 6, "initial_c": 1e-2, "lr": 0.01,
                            "optimizer": "gd"}),
    "dim": AttackDescriptor("dim", (TRANSFER,), BOTH_GOALS, "constrained", BOTH_NORMS,
                            "iterations", True, "iters",
                            {"iters": 10, "alpha": None, "mu": 1.0, "transform_prob": 0.5, "min_ratio": 0.9,
                             "loss_kind": "xent"}),
    "zoo": AttackDescriptor("zoo", (SCORE,), BOTH_GOALS, "optimized", ("l2",),
                            "queries", True, "query_cap",
                            {"query_cap": DEFAULT_QUERY_CAP, "sigma": 1e-4, "step": 0.01, "c": 10.0}),
    "nes": AttackDescriptor("nes", (SCORE,), BOTH_GOALS, "constrained", BOTH_NORMS,
                            "queries", True, "query_cap",
                            {"query_cap": DEFAULT_QUERY_CAP, "sigma": 0.001, "q": 100, "alpha": None}),
    "spsa": AttackDescriptor("spsa", (SCORE,), BOTH_GOALS, "constrained", BOTH_NORMS,
                             "queries", True, "query_cap",
                             {"query_cap": DEFAULT_QUERY_CAP, "sigma": 0.001, "q": 100, "alpha": None}),
    "nattack": AttackDescriptor("nattack", (SCORE,), BOTH_GOALS, "constrained", BOTH_NORMS,
                                "queries", True, "query_cap",
                                {"query_cap": DEFAULT_QUERY_CAP, "var": 0.1, "lr": 0.02, "samples": 100}),
    "boundary": AttackDescriptor("boundary", (DECISION,), BOTH_GOALS, "optimized", ("l2",),
                                 "queries", True, "query_cap",
                                 {"query_cap": DEFAULT_QUERY_CAP, "spherical_step": 0.01, "source_step": 0.01}),
    "evolutionary": AttackDescriptor("evolutionary", (DECISION,), BOTH_GOALS, "optimized", ("l2",),
                                     "queries", True, "query_cap",
                                     {"query_cap": DEFAULT_QUERY_CAP, "reduction": 2, "mu": 0.01}),
}

# Iterative attacks run fewer iterations when crafting transfer examples.
TRANSFER_ITERS = 10

# Parameters every family accepts on top of its method's own.
COMMON_PARAMS = {"adaptive": True, "eot_samples": DEFAULT_EOT_SAMPLES}


def derive_seeds(seed: int) -> Tuple[int, int]:
    """Independent (attack, victim) seeds derived from one run seed."""
    attack_seed, victim_seed = np.random.SeedSequence(int(seed)).generate_state(2)
    return int(attack_seed), int(victim_seed)


@dataclass(frozen=True)
class AttackFamily:
    """A configured attack: descriptor + knowledge setting + parameter overrides."""
    name: str
    descriptor: AttackDescriptor
    knowledge: str
    params: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.knowledge not in self.descriptor.knowledge:
            raise ConfigError(
                f"Attack '{self.name}': {self.descriptor.method} does not support {self.knowledge} knowledge "
                f"(knowledge column allows {list(self.descriptor.knowledge)})")
        allowed = set(self.descriptor.defaults) | set(COMMON_PARAMS)
        unknown = sorted(set(self.params) - allowed)
        if unknown:
            raise ConfigError(f"Attack '{self.name}': unknown parameters {unknown} for {self.descriptor.method}")

    @property
    def method(self) -> str:
        return self.descriptor.method

    @property
    def optimized(self) -> bool:
        return self.descriptor.optimized

    @property
    def strength_unit(self) -> str:
        return self.descriptor.strength_unit

    @property
    def checkpointable(self) -> bool:
        return self.descriptor.checkpointable

    @property
    def settings(self) -> Dict[str, object]:
        """Effective parameters: method defaults, transfer adjustments, then overrides."""
        merged = dict(COMMON_PARAMS)
        merged.update(self.descriptor.defaults)
        if self.knowledge == TRANSFER and "iters" in merged:
            merged["iters"] = TRANSFER_ITERS
        merged.update(self.params)
        return merged

    @property
    def max_strength(self) -> int:
        """Strength of an unrestricted run (1 for single-step attacks)."""
        key = self.descriptor.strength_param
        return 1 if key is None else int(self.settings[key])

    def incompatibility(self, spec: ThreatSpec) -> Optional[str]:
        """Why this attack cannot run under `spec`, or None when it can."""
        if spec.goal.value not in self.descriptor.goals:
            return (f"{self.descriptor.method} goals column allows {list(self.descriptor.goals)}, "
                    f"not {spec.goal.value}")
        if spec.norm.value not in self.descriptor.distances:
            return (f"{self.descriptor.method} distances column allows {list(self.descriptor.distances)}, "
                    f"not {spec.norm.value}")
        return None

    def check_compatible(self, spec: ThreatSpec):
        reason = self.incompatibility(spec)
        if reason:
            raise ConfigError(f"Attack '{self.name}' is incompatible: {reason}")

    def to_dict(self) -> dict:
        return {"name": self.name, "method": self.method, "knowledge": self.knowledge,
                "capability": self.descriptor.capability, "params": dict(sorted(self.params.items()))}

    # ------------------------------------------------------------------
    # Running
    # ------------------------------------------------------------------

    def grad_oracle(self, model, seed: int) -> GradOracle:
        """White-box view of `model`, adaptive against defended models when configured."""
        settings = self.settings
        if not settings["adaptive"]:
            return GradOracle(model, seed=seed)
        substitute = identity_substitute if getattr(model, "has_non_differentiable", False) else None
        k = int(settings["eot_samples"]) if model.is_random else 1
        return GradOracle(model, k_samples=k, seed=seed, substitute=substitute)

    def run(self, victim, x, spec: ThreatSpec, goal_label: int, seed: int = 0, checkpoints=None,
            strength: Optional[int] = None, source=None, substitute=None) -> AttackOutcome:
        """
        Run the attack on one example.

        Args:
            victim: Model under attack (Classifier or DefendedModel)
            x: Clean input
            spec: Threat spec
            goal_label: y (untargeted) or y* (targeted)
            seed: Run seed; attack and victim randomness are derived from it
            checkpoints: Strengths at which to keep intermediate iterates
            strength: Truncate the run at this many iterations or queries
            source: Input classified as the target (decision-based targeted starts)
            substitute: Model gradients are taken on for transfer attacks

        Returns:
            AttackOutcome; success is judged on the victim
        """
        self.check_compatible(spec)
        x = as_tensor(x, victim.input_shape)
        attack_seed, victim_seed = derive_seeds(seed)
        settings = self.settings
        key = self.descriptor.strength_param
        if strength is not None and key is not None:
            settings[key] = int(strength)
        method_params = {k: v for k, v in settings.items()
                         if k in self.descriptor.defaults and k != "query_cap"}

        if self.knowledge in (WHITE, TRANSFER):
            crafting_model = victim if self.knowledge == WHITE else substitute
            if crafting_model is None:
                raise ConfigError(f"Transfer attack '{self.name}' needs a substitute model")
            oracle = self.grad_oracle(crafting_model, attack_seed)
            outcome = self._run_gradient(oracle, x, spec, goal_label, attack_seed, checkpoints, method_params)
            if self.knowledge == TRANSFER or oracle.model is not victim or self.method == "identity":
                outcome = self._judge_on_victim(outcome, victim, spec, goal_label, victim_seed)
            return outcome

        mode = "scores" if self.knowledge == SCORE else "labels"
        oracle = QueryOracle(victim, mode, cap=int(settings["query_cap"]), seed=victim_seed)
        return self._run_query(oracle, x, spec, goal_label, attack_seed, checkpoints, method_params, source)

    def _run_gradient(self, oracle: GradOracle, x: np.ndarray, spec: ThreatSpec, goal_label: int,
                      seed: int, checkpoints, params: dict) -> AttackOutcome:
        method = self.method
        if method == "identity":
            snapshots = {int(c): x for c in checkpoints} if checkpoints is not None else None
            return AttackOutcome(x.copy(), False, 0.0, snapshots=snapshots)
        if method == "fgsm":
            outcome = attacks_whitebox.fgsm(oracle, x, spec, goal_label, **params)
            if checkpoints is not None:
                outcome.snapshots = {int(c): (x if c < 1 else outcome.x_adv) for c in sorted(checkpoints)}
            return outcome
        if method == "dim":
            return attacks_whitebox.dim(oracle, x, spec, goal_label, seed=seed, checkpoints=checkpoints, **params)
        attack = getattr(attacks_whitebox, method)
        return attack(oracle, x, spec, goal_label, checkpoints=checkpoints, **params)

    def _run_query(self, oracle: QueryOracle, x: np.ndarray, spec: ThreatSpec, goal_label: int, seed: int,
                   checkpoints, params: dict, source) -> AttackOutcome:
        method = self.method
        if method in ("nes", "spsa"):
            return attacks_blackbox.score_attack(oracle, x, spec, goal_label, estimator=method, seed=seed,
                                                 checkpoints=checkpoints, **params)
        if method in ("boundary", "evolutionary"):
            attack = getattr(attacks_blackbox, method)
            return attack(oracle, x, spec, goal_label, seed=seed, starting_point=source,
                          checkpoints=checkpoints, **params)
        attack = getattr(attacks_blackbox, method)
        return attack(oracle, x, spec, goal_label, seed=seed, checkpoints=checkpoints, **params)

    @staticmethod
    def _judge_on_victim(outcome: AttackOutcome, victim, spec: ThreatSpec, goal_label: int,
                         seed: int) -> AttackOutcome:
        predicted = victim.predict_label(outcome.x_adv, np.random.default_rng(seed))
        outcome.success = is_success(predicted, goal_label, spec)
        return outcome


def make_attack(name: str, method: Optional[str] = None, knowledge: Optional[str] = None,
                **params) -> AttackFamily:
    """
    Build a configured attack.

    Args:
        name: Display name (also the method when `method` is omitted)
        method: Registry key of the underlying algorithm
        knowledge: Knowledge setting (defaults to the first the method supports)
        **params: Overrides of the method's defaults

    Raises:
        ConfigError: Unknown method, unsupported knowledge or unknown parameter
    """
    method = method or name
    if method not in DESCRIPTORS:
        raise ConfigError(f"Unknown attack method '{method}' (expected one of {sorted(DESCRIPTORS)})")
    descriptor = DESCRIPTORS[method]
    knowledge = knowledge or descriptor.knowledge[0]
    if knowledge not in KNOWLEDGE:
        raise ConfigError(f"Attack '{name}': unknown knowledge '{knowledge}' (expected one of {list(KNOWLEDGE)})")
    return AttackFamily(name, descriptor, knowledge, dict(params))


def compatibility_matrix() -> Dict[str, dict]:
    """The registry as plain data, one entry per method."""
    return {
        method: {
            "knowledge": list(d.knowledge),
            "goals": list(d.goals),
            "capability": d.capability,
            "distances": list(d.distances),
            "strength_unit": d.strength_unit,
            "checkpointable": d.checkpointable,
        }
        for method, d in DESCRIPTORS.items()
    }
