"""
Static SVG rendering of robustness curves.

One panel per (attack, norm, goal, curve kind) with one line per defense.
Text is kept as SVG text and the id salt is fixed, so identical curves
produce identical files.
"""

import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from data_io import RunRecord
from errors import InvalidInputError
from eval_curves import RobustnessCurve

logger = logging.getLogger(__name__)

SVG_PARAMS = {
    "svg.hashsalt": "adversarial-bench",
    "svg.fonttype": "none",
}

NORM_LABELS = {"linf": "ℓ∞", "l2": "ℓ2"}


def _as_curve(item) -> RobustnessCurve:
    return item if isinstance(item, RobustnessCurve) else RobustnessCurve.from_dict(item)


def _xlabel(curve: RobustnessCurve) -> str:
    if curve.kind == "budget":
        return f"perturbation budget ε ({NORM_LABELS.get(curve.norm, curve.norm)})"
    unit = curve.extra.get("unit", "iterations")
    return f"attack strength ({unit}, ε = {curve.extra.get('eps', '?')})"


def plot_curves(curves: Sequence, out_path: Union[str, Path], metric: str = "accuracy",
                title: Optional[str] = None) -> Path:
    """
    Draw curves into one SVG panel.

    Args:
        curves: RobustnessCurve objects or their dicts, drawn and listed in the legend in order
        out_path: Destination .svg file
        metric: "accuracy" or "asr"
        title: Panel title (defaults to attack, norm and goal of the first curve)

    Returns:
        Path of the written SVG

    Raises:
        InvalidInputError: If no curve is given or the metric is unknown
    """
    curves = [_as_curve(c) for c in curves]
    if not curves:
        raise InvalidInputError("plot_curves needs at least one curve")
    if metric not in ("accuracy", "asr"):
        raise InvalidInputError(f"Unknown plot metric '{metric}' (expected accuracy or asr)")
    first = curves[0]
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    with plt.rc_context(SVG_PARAMS):
        fig, ax = plt.subplots(figsize=(6.4, 4.2))
        for index, curve in enumerate(curves):
            if metric == "accuracy":
                ys = curve.accuracies
            else:
                ys = np.array([np.nan if a is None else a for a in curve.asrs], dtype=np.float64)
            (line,) = ax.plot(curve.abscissae, ys, marker="o", markersize=3, label=curve.defense)
            line.set_gid(f"curve-{index}")
        ax.set_xlabel(_xlabel(first))
        ax.set_ylabel(f"{'accuracy' if metric == 'accuracy' else 'attack success rate'} ({first.goal})")
        ax.set_ylim(-0.02, 1.02)
        ax.grid(True, alpha=0.3)
        ax.set_title(title or f"{first.attack}: {NORM_LABELS.get(first.norm, first.norm)}, {first.goal}")
        ax.legend(loc="best")
        fig.tight_layout()
        fig.savefig(out_path, format="svg", metadata={"Date": None})
        plt.close(fig)

    logger.info(f"Plot saved to {out_path} ({len(curves)} curves)")
    return out_path


def group_curves(curves: Sequence) -> Dict[Tuple[str, str, str, str], List[RobustnessCurve]]:
    """Curves grouped by (attack, norm, goal, kind), groups and members in input order."""
    groups: Dict[Tuple[str, str, str, str], List[RobustnessCurve]] = OrderedDict()
    for item in curves:
        curve = _as_curve(item)
        groups.setdefault((curve.attack, curve.norm, curve.goal, curve.kind), []).append(curve)
    return groups


def plot_record(record: RunRecord, out_dir: Union[str, Path], metric: str = "accuracy") -> List[Path]:
    """One SVG per (attack, norm, goal, kind) of a run record."""
    out_dir = Path(out_dir)
    paths = []
    for (attack, norm, goal, kind), curves in group_curves(record.curves).items():
        paths.append(plot_curves(curves, out_dir / f"{attack}_{norm}_{goal}_{kind}.svg", metric))
    if not paths:
        logger.warning("Run record has no curves to plot")
    return paths
