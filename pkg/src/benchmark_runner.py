"""
Benchmark orchestration: prepare data, train or load models, assemble
defenses and run every configured cell.

A cell is one attack against one defense under one norm and goal. Each
cell yields its budget and strength curves plus one outcome per evaluation
example at the fixed budget. With an output directory every finished cell is
also written to `cells/<key>.json`, and a resumed run reuses those files.
"""

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from attack_registry import TRANSFER, AttackFamily, make_attack
from attacks_whitebox import is_success
from config_loader import Cell, build_attacks, expand_cells, select_cells
from data_io import (Dataset, RunRecord, assign_targets, gen_synthetic, load_csv, load_idx, load_json, save_json,
                     split)
from defenses import DefendedModel, DefenseSpec, adversarial_train, build_defense
from eval_curves import (RobustnessCurve, budget_curve_with_thresholds, clean_accuracy, curve_budget, curve_strength,
                         effective_input, evaluate_attack)
from model_io import load_model, load_model_json, save_model, save_model_json
from report_generator import save_gallery
from tensor_core import Classifier
from threat import Goal, Norm, ThreatSpec
from trainer import TrainingLog, natural_train
from transfer_harness import select_substitutes, transfer_eval

logger = logging.getLogger(__name__)

RANKING_ATTACK = "bim"


def derived_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Data and models
# ---------------------------------------------------------------------------

def prepare_data(config: dict) -> Tuple[Dataset, Dataset]:
    """Training and evaluation splits, with targets assigned on the evaluation split."""
    dataset_cfg = config["dataset"]
    seed = config["run"]["seed"]
    kind = dataset_cfg["kind"]
    if kind == "idx":
        full = load_idx(dataset_cfg["images"], dataset_cfg["labels"], dataset_cfg["num_classes"],
                        dataset_cfg["limit"])
    elif kind == "csv":
        full = load_csv(dataset_cfg["path"], dataset_cfg["input_shape"], dataset_cfg["num_classes"],
                        dataset_cfg["limit"])
    else:
        full = gen_synthetic(kind, dataset_cfg["n"], seed, **dataset_cfg["params"])
    train, evaluation = split(full, dataset_cfg["n_train"], seed)

    limit = config["evaluation"]["eval_limit"]
    if limit is not None and limit < len(evaluation):
        evaluation = evaluation.subset(range(limit), evaluation.name)
    targets_seed = config["evaluation"]["targets_seed"]
    evaluation = assign_targets(evaluation, seed if targets_seed is None else targets_seed)
    logger.info(f"Data: {full.name}, {len(train)} train / {len(evaluation)} eval examples, "
                f"input {evaluation.input_shape}, {evaluation.num_classes} classes")
    return train, evaluation


def train_models(config: dict, train: Dataset, progress: bool = False
                 ) -> Tuple[Dict[str, Classifier], Dict[str, TrainingLog]]:
    """
    Train (or load) every configured model.

    Models with a `path` are loaded from ADVB (or its .json mirror); the
    rest are trained with a seed derived from the run seed and their position.
    """
    models, logs = {}, {}
    for index, (name, settings) in enumerate(config["models"].items()):
        if settings["path"]:
            path = Path(settings["path"])
            models[name] = load_model_json(path) if path.suffix == ".json" else load_model(path)
            continue
        seed = derived_seed(config["run"]["seed"], index)
        logger.info(f"Training model '{name}' ({settings['arch']}, {settings['training']}, seed {seed})")
        if settings["training"] == "adversarial":
            spec = ThreatSpec(Norm(settings["norm"]), eps=settings["eps"])
            model, log = adversarial_train(train, settings["arch"], spec, attack_iters=settings["attack_iters"],
                                           epochs=settings["epochs"], seed=seed, lr=settings["lr"],
                                           batch_size=settings["batch_size"], hidden=settings["hidden"],
                                           progress=progress)
        else:
            model, log = natural_train(train.inputs, train.labels, settings["arch"], train.input_shape,
                                       train.num_classes, epochs=settings["epochs"], lr=settings["lr"],
                                       batch_size=settings["batch_size"], seed=seed, hidden=settings["hidden"])
        models[name], logs[name] = model, log
    return models, logs


def save_models(models: Dict[str, Classifier], out_dir: Union[str, Path]) -> List[Path]:
    out_dir = Path(out_dir) / "models"
    paths = []
    for name, model in models.items():
        paths.append(save_model(model, out_dir / f"{name}.advb"))
        save_model_json(model, out_dir / f"{name}.json")
    return paths


def build_defenses(config: dict, models: Dict[str, Classifier]) -> Dict[str, DefendedModel]:
    return {
        name: build_defense(DefenseSpec(name, settings["models"], settings["transforms"], settings["noise_sigma"],
                                        settings["noise_samples"]), models)
        for name, settings in config["defenses"].items()
    }


# ---------------------------------------------------------------------------
# Cells
# ---------------------------------------------------------------------------

class SubstituteBound:
    """An attack whose gradients always come from one substitute model."""

    def __init__(self, attack: AttackFamily, substitute):
        self.attack = attack
        self.substitute = substitute

    def __getattr__(self, name):
        return getattr(self.attack, name)

    def run(self, victim, x, spec, goal_label, seed=0, checkpoints=None, strength=None, source=None,
            substitute=None):
        return self.attack.run(victim, x, spec, goal_label, seed=seed, checkpoints=checkpoints, strength=strength,
                               source=source, substitute=self.substitute)


@dataclass
class BenchmarkContext:
    """Everything a cell needs, shared read-only between cells."""
    config: dict
    train: Dataset
    evaluation: Dataset
    models: Dict[str, Classifier]
    defenses: Dict[str, DefendedModel]
    attacks: Dict[str, AttackFamily]
    substitutes: Dict[str, str] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.config["run"]["seed"]


def prepare_context(config: dict, progress: bool = False) -> BenchmarkContext:
    train, evaluation = prepare_data(config)
    models, _ = train_models(config, train, progress)
    return BenchmarkContext(config, train, evaluation, models, build_defenses(config, models), build_attacks(config))


def choose_substitutes(context: BenchmarkContext) -> Dict[str, str]:
    """Substitute per target defense: the configured one, or the role rule over white-box BIM curves."""
    evaluation_cfg = context.config["evaluation"]
    names = list(context.defenses)
    if evaluation_cfg["substitute"] != "auto":
        return {name: evaluation_cfg["substitute"] for name in names}
    if len(names) < 2:
        logger.warning("Only one defense; transfer cells craft on the target itself")
        return {name: name for name in names}

    norm = evaluation_cfg["norms"][0]
    spec = ThreatSpec(Norm(norm), Goal.UNTARGETED)
    ranking_attack = make_attack(RANKING_ATTACK)
    curves, clean = {}, {}
    for name, defense in context.defenses.items():
        curves[name] = curve_budget(ranking_attack, defense, context.evaluation, spec,
                                    evaluation_cfg["eps_grid"][norm], seed=context.seed,
                                    tol=evaluation_cfg["tol"][norm])
        clean[name] = clean_accuracy(defense, context.evaluation, context.seed)
    return select_substitutes(curves, clean)


def run_cell(context: BenchmarkContext, cell: Cell, progress: bool = False, gallery_dir: Optional[Path] = None,
             gallery_size: int = 8) -> dict:
    """
    Curves and fixed-budget outcomes of one cell.

    Returns:
        {"cell": key, "curves": [...], "outcomes": [...]}
    """
    config = context.config
    evaluation_cfg = config["evaluation"]
    attack: AttackFamily = context.attacks[cell.attack]
    defense = context.defenses[cell.defense]
    dataset = context.evaluation
    seed = context.seed
    spec = cell.spec()
    fixed = spec.with_eps(evaluation_cfg["fixed_eps"][cell.norm])
    logger.info(f"Cell {cell.key}: seed {seed}, fixed eps {fixed.eps}")

    runner = attack
    substitute_name = None
    if attack.knowledge == TRANSFER:
        substitute_name = context.substitutes.get(cell.defense, cell.defense)
        runner = SubstituteBound(attack, context.defenses[substitute_name])

    curves = []
    thresholds = None
    if "budget" in evaluation_cfg["curves"]:
        grid = evaluation_cfg["eps_grid"][cell.norm]
        if substitute_name is not None:
            curve = transfer_eval(context.defenses[substitute_name], {cell.defense: defense}, attack, dataset, spec,
                                  grid, seed, evaluation_cfg["budget_method"], evaluation_cfg["tol"][cell.norm],
                                  substitute_name=substitute_name)[cell.defense]
        else:
            curve, thresholds = budget_curve_with_thresholds(attack, defense, dataset, spec, grid, seed,
                                                             evaluation_cfg["budget_method"],
                                                             evaluation_cfg["tol"][cell.norm], progress=progress)
        curves.append(curve)
    if "strength" in evaluation_cfg["curves"]:
        grid = config["attacks"][cell.attack].get("strength_grid") or \
            evaluation_cfg["strength_grid"][attack.strength_unit]
        curves.append(curve_strength(runner, defense, dataset, fixed, grid, seed, progress=progress))

    point = evaluate_attack(defense, runner, dataset, fixed, seed, progress=progress)
    if gallery_dir is not None:
        pairs = [(dataset[i].x, effective_input(point.outcomes[i], dataset[i].x, fixed, attack.optimized))
                 for i in range(min(gallery_size, len(dataset)))]
        save_gallery(pairs, _cell_path(gallery_dir, cell).with_suffix(".png"))
    outcomes = []
    for i, (outcome, predicted) in enumerate(zip(point.outcomes, point.adversarial)):
        entry = outcome.to_dict()
        entry["success"] = bool(is_success(int(predicted), int(point.goals[i]), fixed))
        if thresholds is not None:
            entry["eps_star"] = thresholds[i]
        entry.update({"cell": cell.key, "index": i, "label": int(point.labels[i]),
                      "clean_predicted": int(point.clean[i]), "predicted": int(predicted)})
        outcomes.append(entry)

    curve_dicts = []
    for curve in curves:
        data = curve.to_dict()
        data["cell"] = cell.key
        curve_dicts.append(data)
    return {"cell": cell.key, "curves": curve_dicts, "outcomes": outcomes}


def _cell_path(out_dir: Path, cell: Cell) -> Path:
    return out_dir / "cells" / (cell.key.replace(":", "__") + ".json")


def run_benchmark(config: dict, cells: Optional[Sequence[str]] = None, out_dir: Optional[Union[str, Path]] = None,
                  resume: bool = False, progress: bool = False, context: Optional[BenchmarkContext] = None,
                  gallery_dir: Optional[Union[str, Path]] = None) -> RunRecord:
    """
    Run the configured benchmark.

    Args:
        config: Normalized config
        cells: Explicit attack:defense:norm:goal cells (overrides the config matrix)
        out_dir: Where per-cell results are written (enables resume)
        resume: Reuse finished cells found in out_dir
        progress: Show progress bars
        context: Prepared data/models (built from the config when omitted)
        gallery_dir: Where per-cell PNG galleries of the first examples are written

    Returns:
        RunRecord with clean accuracies, curves and per-example outcomes

    Raises:
        ConfigError: If an explicit cell is incompatible with its attack
    """
    seed = config["run"]["seed"]
    logger.info(f"Benchmark '{config['run']['name']}' starting with seed {seed}")
    requested = cells if cells is not None else config["evaluation"]["cells"]
    if requested is not None:
        selected, skipped = select_cells(config, requested), []
    else:
        selected, skipped = expand_cells(config)

    context = context or prepare_context(config, progress)
    clean = {name: clean_accuracy(defense, context.evaluation, seed) for name, defense in context.defenses.items()}
    for name, value in clean.items():
        logger.info(f"Clean accuracy of {name}: {value:.4f}")
    if any(context.attacks[c.attack].knowledge == TRANSFER for c in selected):
        context.substitutes = choose_substitutes(context)

    out_dir = Path(out_dir) if out_dir is not None else None
    write_lock = threading.Lock()
    timings: Dict[str, float] = {}

    def execute(cell: Cell) -> dict:
        path = _cell_path(out_dir, cell) if out_dir is not None else None
        if resume and path is not None and path.exists():
            logger.info(f"Cell {cell.key}: reusing {path}")
            return load_json(path)
        started = time.perf_counter()
        result = run_cell(context, cell, progress and config["run"]["max_workers"] == 1,
                          Path(gallery_dir) if gallery_dir is not None else None)
        timings[cell.key] = time.perf_counter() - started
        if path is not None:
            with write_lock:
                save_json(result, path)
        return result

    workers = config["run"]["max_workers"]
    if workers <= 1:
        results = [execute(cell) for cell in selected]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(execute, selected))

    record = RunRecord(config=config, seed=seed, clean_accuracy=clean, skipped=skipped)
    for result in results:
        record.curves.extend(result["curves"])
        record.outcomes.extend(result["outcomes"])
    record.wall_clock = dict(sorted(timings.items()))
    logger.info(f"Benchmark finished: {len(results)} cells, {len(skipped)} skipped")
    return record


def curves_of(record: RunRecord) -> List[RobustnessCurve]:
    return [RobustnessCurve.from_dict(data) for data in record.curves]
