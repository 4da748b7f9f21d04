"""
Point-wise report tables and adversarial-example galleries.

The table lists, per cell, clean accuracy, accuracy and attack success rate
at the fixed budget, and the median minimum perturbation.
"""

import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from data_io import RunRecord, save_json
from errors import InvalidInputError
from eval_curves import RobustnessCurve, accuracy_at, median_min_perturbation, rates

logger = logging.getLogger(__name__)

COLUMNS = (
    ("cell", "Cell", 40),
    ("clean_accuracy", "Clean", 7),
    ("accuracy", "Acc@eps", 8),
    ("asr", "ASR@eps", 8),
    ("median_eps_star", "Median eps*", 12),
    ("mean_queries", "Queries", 8),
)


def _fixed_point(curves: List[RobustnessCurve], fixed_eps: Optional[float]) -> Tuple[Optional[float], Optional[float]]:
    """Accuracy and ASR at the fixed budget, from the strength curve's last point or the budget curve."""
    for curve in curves:
        if curve.kind == "strength":
            _, acc, asr = curve.points[-1]
            return acc, asr
    for curve in curves:
        if curve.kind == "budget" and fixed_eps is not None:
            acc = accuracy_at(curve, fixed_eps)
            index = int(np.nonzero(curve.abscissae <= fixed_eps + 1e-12)[0][-1])
            return acc, curve.points[index][2]
    return None, None


def _outcome_rates(outcomes: List[dict], targeted: bool) -> Tuple[float, Optional[float]]:
    labels = np.array([o["label"] for o in outcomes])
    clean = np.array([o["clean_predicted"] for o in outcomes])
    predicted = np.array([o["predicted"] for o in outcomes])
    success = np.array([o["success"] for o in outcomes], dtype=bool)
    return rates(clean == labels, success, predicted == labels, targeted)


def summarize(record: RunRecord) -> List[dict]:
    """One row per cell, in the order the cells appear in the record."""
    curves_by_cell: Dict[str, List[RobustnessCurve]] = defaultdict(list)
    order: List[str] = []
    for data in record.curves:
        key = data.get("cell") or f"{data['attack']}:{data['defense']}:{data['norm']}:{data['goal']}"
        if key not in curves_by_cell and key not in order:
            order.append(key)
        curves_by_cell[key].append(RobustnessCurve.from_dict(data))
    outcomes_by_cell: Dict[str, List[dict]] = defaultdict(list)
    for outcome in record.outcomes:
        if outcome["cell"] not in order:
            order.append(outcome["cell"])
        outcomes_by_cell[outcome["cell"]].append(outcome)

    fixed = record.config.get("evaluation", {}).get("fixed_eps", {})
    rows = []
    for key in order:
        attack, defense, norm, goal = key.split(":")
        acc, asr = _fixed_point(curves_by_cell[key], fixed.get(norm))
        outcomes = outcomes_by_cell[key]
        if acc is None and outcomes:
            acc, asr = _outcome_rates(outcomes, goal == "targeted")
        stars = [o.get("eps_star") for o in outcomes]
        median = median_min_perturbation(stars) if any(s is not None for s in stars) else None
        rows.append({
            "cell": key,
            "attack": attack,
            "defense": defense,
            "norm": norm,
            "goal": goal,
            "clean_accuracy": record.clean_accuracy.get(defense),
            "accuracy": acc,
            "asr": asr,
            "median_eps_star": median,
            "mean_queries": float(np.mean([o["queries_used"] for o in outcomes])) if outcomes else None,
        })
    return rows


def _cell_text(value, width: int) -> str:
    if value is None:
        text = "-"
    elif isinstance(value, float):
        text = "inf" if np.isinf(value) else f"{value:.4f}"
    else:
        text = str(value)
    return text[:width].ljust(width)


def format_table(rows: Sequence[dict], title: str = "ROBUSTNESS REPORT") -> str:
    lines = ["=" * 80, title, "=" * 80]
    lines.append(" ".join(header.ljust(width) for _, header, width in COLUMNS))
    lines.append("-" * 80)
    for row in rows:
        lines.append(" ".join(_cell_text(row.get(key), width) for key, _, width in COLUMNS))
    lines.append("=" * 80)
    return "\n".join(lines) + "\n"


def save_report(record: RunRecord, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    """Write report.txt and report.json; infinite medians are stored as null in JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = summarize(record)
    text_path = out_dir / "report.txt"
    text_path.write_text(format_table(rows))
    json_rows = [{k: (None if isinstance(v, float) and np.isinf(v) else v) for k, v in row.items()} for row in rows]
    json_path = save_json({"seed": record.seed, "rows": json_rows}, out_dir / "report.json")
    logger.info(f"Report saved to {text_path} and {json_path} ({len(rows)} cells)")
    return text_path, json_path


# ---------------------------------------------------------------------------
# Gallery
# ---------------------------------------------------------------------------

def _to_hwc(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :, None]
    if x.ndim == 2:
        return x[:, :, None]
    if x.ndim == 3 and x.shape[0] in (1, 3):
        return np.transpose(x, (1, 2, 0))
    raise InvalidInputError(f"Cannot render input of shape {x.shape}")


def _to_image(hwc: np.ndarray, scale: int) -> Image.Image:
    pixels = (np.clip(hwc, 0.0, 1.0) * 255).round().astype(np.uint8)
    if pixels.shape[2] == 1:
        image = Image.fromarray(pixels[:, :, 0]).convert("RGB")
    else:
        image = Image.fromarray(pixels)
    return image.resize((image.width * scale, image.height * scale), Image.Resampling.NEAREST)


def save_gallery(pairs: Sequence[Tuple[np.ndarray, np.ndarray]], out_path: Union[str, Path], scale: int = 4,
                 amplify: float = 10.0, padding: int = 2) -> Path:
    """
    Write a PNG grid with one row per (clean, adversarial) pair.

    Columns are the clean input, the adversarial input and the perturbation
    amplified around mid-gray. Grayscale (1, H, W), RGB (3, H, W) and flat
    vector inputs are supported.

    Raises:
        InvalidInputError: If pairs is empty or an input cannot be rendered
    """
    if not pairs:
        raise InvalidInputError("save_gallery needs at least one pair")
    rows = []
    for clean, adversarial in pairs:
        clean_hwc, adv_hwc = _to_hwc(clean), _to_hwc(adversarial)
        diff = 0.5 + amplify * (adv_hwc - clean_hwc)
        rows.append([_to_image(clean_hwc, scale), _to_image(adv_hwc, scale), _to_image(diff, scale)])

    cell_w = max(img.width for row in rows for img in row)
    cell_h = max(img.height for row in rows for img in row)
    grid = Image.new("RGB", (3 * cell_w + 4 * padding, len(rows) * cell_h + (len(rows) + 1) * padding),
                     (255, 255, 255))
    for r, row in enumerate(rows):
        for c, img in enumerate(row):
            grid.paste(img, (padding + c * (cell_w + padding), padding + r * (cell_h + padding)))

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    grid.save(out_path, format="PNG")
    logger.info(f"Gallery saved to {out_path} ({len(rows)} examples)")
    return out_path
