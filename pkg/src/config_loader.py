"""
Benchmark configuration: YAML loading, defaults, validation and the
expansion of attack x defense x norm x goal cells.

`normalize_config` is idempotent: the normalized dict stored in a run
record validates again to itself.
"""

import copy
import itertools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import yaml

from attack_registry import DESCRIPTORS, KNOWLEDGE, AttackFamily, make_attack
from attacks_blackbox import DEFAULT_QUERY_CAP
from errors import ConfigError
from input_transforms import build_transform
from threat import Goal, Norm, ThreatSpec
from trainer import ARCHITECTURES

logger = logging.getLogger(__name__)

DATASET_KINDS = ("two_gaussians", "xor_grid", "robust_features", "idx", "csv")
SECTIONS = ("run", "dataset", "models", "defenses", "attacks", "evaluation", "plot")
CURVE_KINDS = ("budget", "strength")
RESERVED_ATTACK_KEYS = ("method", "knowledge", "strength_grid")

DEFAULT_CONFIG = {
    "run": {
        "name": "desk-benchmark",
        "seed": 0,
        "output_dir": "results",
        "max_workers": 1,
        "log_level": "INFO",
        "log_file": None,
    },
    "dataset": {
        "kind": "two_gaussians",
        "n": 400,
        "n_train": 300,
        "params": {},
        "images": None,
        "labels": None,
        "path": None,
        "input_shape": None,
        "num_classes": 10,
        "limit": None,
    },
    "models": {
        "natural": {},
    },
    "defenses": {
        "natural": {"models": ["natural"]},
    },
    "attacks": {},
    "evaluation": {
        "norms": ["linf", "l2"],
        "goals": ["untargeted"],
        "eps_grid": {
            "linf": [0.0, 0.025, 0.05, 0.1, 0.15, 0.2, 0.3],
            "l2": [0.0, 0.1, 0.25, 0.5, 1.0, 1.5, 2.0],
        },
        "strength_grid": {
            "iterations": [0, 1, 2, 5, 10, 20],
            "queries": [0, 500, 1000, 2000, 5000, 10000, 20000],
        },
        "fixed_eps": {"linf": 0.1, "l2": 1.0},
        "tol": {"linf": 1.0 / 510, "l2": 1e-3},
        "curves": ["budget", "strength"],
        "budget_method": "threshold",
        "eval_limit": None,
        "targets_seed": None,
        "substitute": "auto",
        "cells": None,
    },
    "plot": {
        "metric": "accuracy",
    },
}

MODEL_DEFAULTS = {
    "arch": "mlp",
    "training": "natural",
    "epochs": 20,
    "lr": 0.05,
    "batch_size": 32,
    "hidden": 32,
    "path": None,
    "norm": "linf",
    "eps": 0.1,
    "attack_iters": 7,
}

DEFENSE_DEFAULTS = {
    "models": None,
    "transforms": [],
    "noise_sigma": 0.0,
    "noise_samples": 10,
}


@dataclass(frozen=True)
class Cell:
    """One attack x defense x norm x goal combination."""
    attack: str
    defense: str
    norm: str
    goal: str

    @property
    def key(self) -> str:
        return f"{self.attack}:{self.defense}:{self.norm}:{self.goal}"

    @classmethod
    def parse(cls, text: str) -> "Cell":
        parts = text.split(":")
        if len(parts) != 4:
            raise ConfigError(f"Cell must be attack:defense:norm:goal, got '{text}'")
        return cls(*parts)

    def spec(self, eps: float = 0.0) -> ThreatSpec:
        return ThreatSpec(Norm(self.norm), Goal(self.goal), eps)


# ---------------------------------------------------------------------------
# Loading and normalization
# ---------------------------------------------------------------------------

def load_config(path: Union[str, Path]) -> dict:
    """
    Read and normalize a YAML config.

    Raises:
        FileNotFoundError: If the file does not exist
        ConfigError: If the file is not valid YAML or fails validation
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        with open(path, 'r') as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}")
    config = normalize_config(raw or {})
    logger.info(f"Loaded config from {path}: {len(config['attacks'])} attacks, "
                f"{len(config['defenses'])} defenses, seed {config['run']['seed']}")
    return config


def _merge_section(name: str, defaults: dict, given) -> dict:
    if given is None:
        return copy.deepcopy(defaults)
    if not isinstance(given, dict):
        raise ConfigError(f"Section '{name}' must be a mapping")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"Unknown keys in '{name}': {unknown}")
    merged = copy.deepcopy(defaults)
    for key, value in given.items():
        if isinstance(defaults.get(key), dict) and isinstance(value, dict):
            merged[key] = {**defaults[key], **copy.deepcopy(value)}
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _entries(name: str, given) -> Dict[str, dict]:
    if not isinstance(given, dict):
        raise ConfigError(f"Section '{name}' must map names to settings")
    entries = {}
    for entry_name, settings in given.items():
        if settings is None:
            settings = {}
        if not isinstance(settings, dict):
            raise ConfigError(f"{name}.{entry_name} must be a mapping")
        entries[str(entry_name)] = dict(settings)
    return entries


def _floats(values, key: str) -> List[float]:
    try:
        return [float(v) for v in values]
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be a list of numbers, got {values!r}")


def _increasing(values: List[float], key: str):
    if not values:
        raise ConfigError(f"{key} must not be empty")
    if any(v < 0 for v in values) or any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigError(f"{key} must be non-negative and strictly increasing: {values}")


def normalize_config(raw: dict) -> dict:
    """
    Fill defaults and validate.

    Args:
        raw: Parsed YAML document

    Returns:
        Normalized, JSON-serializable config dict

    Raises:
        ConfigError: Naming the offending key
    """
    if not isinstance(raw, dict):
        raise ConfigError("Config must be a mapping of sections")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"Unknown config sections: {unknown}")

    config = {
        "run": _merge_section("run", DEFAULT_CONFIG["run"], raw.get("run")),
        "dataset": _merge_section("dataset", DEFAULT_CONFIG["dataset"], raw.get("dataset")),
        "evaluation": _merge_section("evaluation", DEFAULT_CONFIG["evaluation"], raw.get("evaluation")),
        "plot": _merge_section("plot", DEFAULT_CONFIG["plot"], raw.get("plot")),
    }
    models = _entries("models", raw.get("models") or DEFAULT_CONFIG["models"])
    config["models"] = {name: _normalize_model(name, settings) for name, settings in models.items()}
    defenses = _entries("defenses", raw.get("defenses") or DEFAULT_CONFIG["defenses"])
    config["defenses"] = {name: _normalize_defense(name, settings, config["models"])
                          for name, settings in defenses.items()}
    attacks = _entries("attacks", raw.get("attacks") or {})
    config["attacks"] = {name: _normalize_attack(name, settings) for name, settings in attacks.items()}

    _validate_run(config["run"])
    _validate_dataset(config["dataset"])
    _validate_evaluation(config["evaluation"], config)
    if config["plot"]["metric"] not in ("accuracy", "asr"):
        raise ConfigError(f"plot.metric must be accuracy or asr, got '{config['plot']['metric']}'")
    return config


def _normalize_model(name: str, settings: dict) -> dict:
    unknown = sorted(set(settings) - set(MODEL_DEFAULTS))
    if unknown:
        raise ConfigError(f"Unknown keys in models.{name}: {unknown}")
    model = {**MODEL_DEFAULTS, **settings}
    if model["arch"] not in ARCHITECTURES:
        raise ConfigError(f"models.{name}.arch must be one of {list(ARCHITECTURES)}, got '{model['arch']}'")
    if model["training"] not in ("natural", "adversarial"):
        raise ConfigError(f"models.{name}.training must be natural or adversarial, got '{model['training']}'")
    if model["norm"] not in ("linf", "l2"):
        raise ConfigError(f"models.{name}.norm must be linf or l2, got '{model['norm']}'")
    for key in ("epochs", "batch_size", "hidden", "attack_iters"):
        if not isinstance(model[key], int) or model[key] < 1:
            raise ConfigError(f"models.{name}.{key} must be a positive integer, got {model[key]!r}")
    model["lr"] = float(model["lr"])
    model["eps"] = float(model["eps"])
    return model


def _normalize_defense(name: str, settings: dict, models: dict) -> dict:
    unknown = sorted(set(settings) - set(DEFENSE_DEFAULTS))
    if unknown:
        raise ConfigError(f"Unknown keys in defenses.{name}: {unknown}")
    defense = copy.deepcopy({**DEFENSE_DEFAULTS, **settings})
    if defense["models"] is None:
        defense["models"] = [name]
    if isinstance(defense["models"], str):
        defense["models"] = [defense["models"]]
    missing = [m for m in defense["models"] if m not in models]
    if missing:
        raise ConfigError(f"defenses.{name}.models refers to unknown models {missing}")
    for transform in defense["transforms"]:
        try:
            build_transform(transform)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"defenses.{name}.transforms: {e}")
    defense["noise_sigma"] = float(defense["noise_sigma"])
    if defense["noise_sigma"] < 0 or int(defense["noise_samples"]) < 1:
        raise ConfigError(f"defenses.{name}: noise_sigma must be >= 0 and noise_samples >= 1")
    return defense


def _normalize_attack(name: str, settings: dict) -> dict:
    attack = dict(settings)
    attack.setdefault("method", name)
    if attack["method"] not in DESCRIPTORS:
        raise ConfigError(f"attacks.{name}.method must be one of {sorted(DESCRIPTORS)}, got '{attack['method']}'")
    attack.setdefault("knowledge", DESCRIPTORS[attack["method"]].knowledge[0])
    if attack["knowledge"] not in KNOWLEDGE:
        raise ConfigError(f"attacks.{name}.knowledge must be one of {list(KNOWLEDGE)}")
    if attack.get("strength_grid") is not None:
        attack["strength_grid"] = [int(s) for s in attack["strength_grid"]]
        _increasing(attack["strength_grid"], f"attacks.{name}.strength_grid")
    else:
        attack["strength_grid"] = None
    build_attack(name, attack)
    return attack


def build_attack(name: str, settings: dict) -> AttackFamily:
    params = {k: v for k, v in settings.items() if k not in RESERVED_ATTACK_KEYS}
    return make_attack(name, settings.get("method"), settings.get("knowledge"), **params)


def build_attacks(config: dict) -> Dict[str, AttackFamily]:
    return {name: build_attack(name, settings) for name, settings in config["attacks"].items()}


def _validate_run(run: dict):
    if not isinstance(run["seed"], int) or run["seed"] < 0:
        raise ConfigError(f"run.seed must be a non-negative integer, got {run['seed']!r}")
    if not isinstance(run["max_workers"], int) or run["max_workers"] < 1:
        raise ConfigError(f"run.max_workers must be a positive integer, got {run['max_workers']!r}")
    if str(run["log_level"]).upper() not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        raise ConfigError(f"run.log_level must be DEBUG, INFO, WARNING or ERROR, got '{run['log_level']}'")


def _validate_dataset(dataset: dict):
    kind = dataset["kind"]
    if kind not in DATASET_KINDS:
        raise ConfigError(f"dataset.kind must be one of {list(DATASET_KINDS)}, got '{kind}'")
    if kind == "idx" and not (dataset["images"] and dataset["labels"]):
        raise ConfigError("dataset.images and dataset.labels are required for idx datasets")
    if kind == "csv" and not (dataset["path"] and dataset["input_shape"]):
        raise ConfigError("dataset.path and dataset.input_shape are required for csv datasets")
    if not isinstance(dataset["n_train"], int) or dataset["n_train"] < 1:
        raise ConfigError(f"dataset.n_train must be a positive integer, got {dataset['n_train']!r}")
    if kind in ("two_gaussians", "xor_grid", "robust_features") and dataset["n_train"] >= dataset["n"]:
        raise ConfigError(f"dataset.n_train ({dataset['n_train']}) must be below dataset.n ({dataset['n']})")


def _validate_evaluation(evaluation: dict, config: dict):
    for norm in evaluation["norms"]:
        if norm not in ("linf", "l2"):
            raise ConfigError(f"evaluation.norms: unknown norm '{norm}'")
        for key in ("eps_grid", "fixed_eps", "tol"):
            if norm not in evaluation[key]:
                raise ConfigError(f"evaluation.{key} has no entry for {norm}")
        evaluation["eps_grid"][norm] = _floats(evaluation["eps_grid"][norm], f"evaluation.eps_grid.{norm}")
        _increasing(evaluation["eps_grid"][norm], f"evaluation.eps_grid.{norm}")
        evaluation["fixed_eps"][norm] = float(evaluation["fixed_eps"][norm])
        evaluation["tol"][norm] = float(evaluation["tol"][norm])
        if evaluation["tol"][norm] <= 0:
            raise ConfigError(f"evaluation.tol.{norm} must be > 0")
    for goal in evaluation["goals"]:
        if goal not in ("untargeted", "targeted"):
            raise ConfigError(f"evaluation.goals: unknown goal '{goal}'")
    for unit, grid in evaluation["strength_grid"].items():
        if unit not in ("iterations", "queries"):
            raise ConfigError(f"evaluation.strength_grid: unknown unit '{unit}'")
        evaluation["strength_grid"][unit] = [int(s) for s in grid]
        _increasing(evaluation["strength_grid"][unit], f"evaluation.strength_grid.{unit}")
    if evaluation["strength_grid"].get("queries", [0])[-1] > DEFAULT_QUERY_CAP:
        raise ConfigError(f"evaluation.strength_grid.queries must not exceed {DEFAULT_QUERY_CAP}")
    unknown_curves = sorted(set(evaluation["curves"]) - set(CURVE_KINDS))
    if unknown_curves:
        raise ConfigError(f"evaluation.curves: unknown curve kinds {unknown_curves}")
    if evaluation["budget_method"] not in ("threshold", "pointwise"):
        raise ConfigError(f"evaluation.budget_method must be threshold or pointwise")
    substitute = evaluation["substitute"]
    if substitute != "auto" and substitute not in config["defenses"]:
        raise ConfigError(f"evaluation.substitute must be 'auto' or a defense name, got '{substitute}'")
    if evaluation["cells"] is not None:
        evaluation["cells"] = [str(c) for c in evaluation["cells"]]
        select_cells(config, evaluation["cells"])


# ---------------------------------------------------------------------------
# Cells
# ---------------------------------------------------------------------------

def _check_names(config: dict, cell: Cell):
    if cell.attack not in config["attacks"]:
        raise ConfigError(f"Cell {cell.key}: unknown attack '{cell.attack}'")
    if cell.defense not in config["defenses"]:
        raise ConfigError(f"Cell {cell.key}: unknown defense '{cell.defense}'")
    if cell.norm not in ("linf", "l2") or cell.goal not in ("untargeted", "targeted"):
        raise ConfigError(f"Cell {cell.key}: norm must be linf or l2 and goal untargeted or targeted")


def expand_cells(config: dict) -> Tuple[List[Cell], List[Dict[str, str]]]:
    """
    Every compatible cell of the configured matrix, in config order.

    Incompatible combinations are skipped and returned with the reason.
    """
    attacks = build_attacks(config)
    evaluation = config["evaluation"]
    cells, skipped = [], []
    for attack, defense, norm, goal in itertools.product(attacks, config["defenses"], evaluation["norms"],
                                                         evaluation["goals"]):
        cell = Cell(attack, defense, norm, goal)
        reason = attacks[attack].incompatibility(cell.spec())
        if reason:
            logger.info(f"Skipping cell {cell.key}: {reason}")
            skipped.append({"cell": cell.key, "reason": reason})
        else:
            cells.append(cell)
    return cells, skipped


def select_cells(config: dict, requested: Iterable[str]) -> List[Cell]:
    """
    Explicitly requested cells.

    Raises:
        ConfigError: For unknown names or a combination the attack cannot run
    """
    attacks = build_attacks(config)
    cells = []
    for text in requested:
        cell = Cell.parse(text)
        _check_names(config, cell)
        attacks[cell.attack].check_compatible(cell.spec())
        cells.append(cell)
    return cells


def with_overrides(config: dict, seed: Optional[int] = None, output_dir: Optional[str] = None) -> dict:
    """Copy of a normalized config with CLI overrides applied."""
    config = copy.deepcopy(config)
    if seed is not None:
        config["run"]["seed"] = int(seed)
    if output_dir is not None:
        config["run"]["output_dir"] = str(output_dir)
    return normalize_config(config)
