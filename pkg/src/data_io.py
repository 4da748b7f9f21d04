"""
Dataset ingestion, synthetic fixtures, target assignment and result persistence.

Supported sources:
- IDX image/label pairs (MNIST layout), pixels scaled by /255
- CSV rows of the form label,p1,...,pd
- Synthetic generators: two_gaussians, xor_grid, robust_features

Results are written as JSON (sorted keys, so identical runs give identical
bytes) and curves additionally as CSV with 17 significant digits.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import IdxFormatError, InvalidInputError

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

SYNTHETIC_KINDS = ("two_gaussians", "xor_grid", "robust_features")

RECORD_VERSION = 1


@dataclass(frozen=True)
class LabeledExample:
    """One input, its true label and (optionally) its target label y*."""
    x: np.ndarray
    y: int
    target: Optional[int] = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable labelled examples with pixels in [0,1]."""
    examples: Tuple[LabeledExample, ...]
    num_classes: int
    name: str
    input_shape: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.num_classes < 2:
            raise InvalidInputError(f"Dataset needs at least 2 classes, got {self.num_classes}")
        for index, ex in enumerate(self.examples):
            if ex.x.shape != self.input_shape:
                raise InvalidInputError(f"Example {index} has shape {ex.x.shape}, expected {self.input_shape}")
            if not 0 <= ex.y < self.num_classes:
                raise InvalidInputError(f"Example {index} label {ex.y} outside [0, {self.num_classes})")
            if np.any(ex.x < 0.0) or np.any(ex.x > 1.0):
                raise InvalidInputError(f"Example {index} has pixels outside [0,1]")
            if ex.target is not None and (ex.target == ex.y or not 0 <= ex.target < self.num_classes):
                raise InvalidInputError(f"Example {index} has invalid target {ex.target} (label {ex.y})")

    @classmethod
    def from_arrays(cls, inputs, labels, num_classes: int, name: str,
                    targets=None) -> "Dataset":
        inputs = np.asarray(inputs, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if len(inputs) != len(labels):
            raise InvalidInputError(f"{len(inputs)} inputs but {len(labels)} labels")
        examples = []
        for i in range(len(inputs)):
            x = inputs[i].copy()
            x.setflags(write=False)
            target = None if targets is None else int(targets[i])
            examples.append(LabeledExample(x, int(labels[i]), target))
        return cls(tuple(examples), num_classes, name, inputs.shape[1:])

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, index: int) -> LabeledExample:
        return self.examples[index]

    @property
    def inputs(self) -> np.ndarray:
        if not self.examples:
            return np.zeros((0,) + self.input_shape)
        return np.stack([ex.x for ex in self.examples])

    @property
    def labels(self) -> np.ndarray:
        return np.array([ex.y for ex in self.examples], dtype=np.int64)

    @property
    def has_targets(self) -> bool:
        return bool(self.examples) and all(ex.target is not None for ex in self.examples)

    @property
    def targets(self) -> Optional[np.ndarray]:
        if not self.has_targets:
            return None
        return np.array([ex.target for ex in self.examples], dtype=np.int64)

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "Dataset":
        return Dataset(tuple(self.examples[i] for i in indices), self.num_classes,
                       name or self.name, self.input_shape)


# ---------------------------------------------------------------------------
# IDX / CSV ingestion
# ---------------------------------------------------------------------------

def _read_idx(path: Union[str, Path], magic: int, ndim: int) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"IDX file not found: {path}")
    raw = path.read_bytes()
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxFormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")

    header = np.frombuffer(raw[:header_len], dtype=">u4")
    if int(header[0]) != magic:
        raise IdxFormatError(f"{path}: wrong magic number 0x{int(header[0]):08x} (expected 0x{magic:08x})")
    dims = tuple(int(d) for d in header[1:])
    expected = int(np.prod(dims))
    body = raw[header_len:]
    if len(body) != expected:
        raise IdxFormatError(f"{path}: expected {expected} data bytes for dims {dims}, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path],
             num_classes: int = 10, limit: Optional[int] = None, name: str = "idx") -> Dataset:
    """
    Load an IDX image/label file pair.

    Images get a leading channel axis, so a 28x28 file yields inputs of
    shape (1, 28, 28).

    Args:
        images_path: IDX3 image file (magic 0x00000803)
        labels_path: IDX1 label file (magic 0x00000801)
        num_classes: Number of classes L
        limit: Keep only the first `limit` examples
        name: Dataset name

    Returns:
        Dataset with pixels divided by 255

    Raises:
        IdxFormatError: On wrong magic, truncated data or count mismatch
    """
    images = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    if np.any(labels >= num_classes):
        raise IdxFormatError(f"Label {int(labels.max())} outside [0, {num_classes})")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]

    inputs = images.astype(np.float64)[:, None, :, :] / 255.0
    logger.info(f"Loaded {len(inputs)} examples of shape {inputs.shape[1:]} from {images_path}")
    return Dataset.from_arrays(inputs, labels, num_classes, name)


def load_csv(path: Union[str, Path], input_shape: Sequence[int], num_classes: int,
             limit: Optional[int] = None, name: str = "csv") -> Dataset:
    """
    Load rows of `label,p1,...,pd`.

    Pixel values may be in [0,1] or 0..255; when any value exceeds 1 the whole
    file is divided by 255.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CSV file not found: {path}")
    dim = int(np.prod(input_shape))

    labels, rows = [], []
    with open(path, newline="") as f:
        for line_no, row in enumerate(csv.reader(f), start=1):
            if not row or not "".join(row).strip():
                continue
            if len(row) != dim + 1:
                raise IdxFormatError(f"{path}:{line_no}: expected {dim + 1} fields, got {len(row)}")
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as e:
                raise IdxFormatError(f"{path}:{line_no}: {e}")
            if limit is not None and len(rows) >= limit:
                break

    if not rows:
        raise IdxFormatError(f"{path}: no data rows")
    inputs = np.asarray(rows, dtype=np.float64)
    if np.any(inputs < 0) or np.any(inputs > 255):
        raise IdxFormatError(f"{path}: pixel values outside [0, 255]")
    if np.any(inputs > 1.0):
        inputs = inputs / 255.0
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise IdxFormatError(f"{path}: labels outside [0, {num_classes})")

    logger.info(f"Loaded {len(rows)} examples from {path}")
    return Dataset.from_arrays(inputs.reshape((-1,) + tuple(input_shape)), labels, num_classes, name)


# ---------------------------------------------------------------------------
# Synthetic fixtures
# ---------------------------------------------------------------------------

def _two_gaussians(rng: np.random.Generator, n: int):
    # class means (-1, 0) and (+1, 0), covariance 0.1 * I, mapped by (v + 2) / 4
    labels = rng.integers(0, 2, size=n)
    raw = rng.normal(0.0, np.sqrt(0.1), size=(n, 2))
    raw[:, 0] += 2.0 * labels - 1.0
    return np.clip((raw + 2.0) / 4.0, 0.0, 1.0), labels


def _xor_grid(rng: np.random.Generator, n: int, cells: int = 4):
    # checkerboard over [0,1]^2: label is the parity of the cell indices
    points = rng.uniform(0.0, 1.0, size=(n, 2))
    index = np.minimum((points * cells).astype(np.int64), cells - 1)
    return points, (index[:, 0] + index[:, 1]) % 2


def _robust_features(rng: np.random.Generator, n: int, non_robust: int = 100,
                     robust_accuracy: float = 0.9):
    # one robust coordinate that agrees with the label 90% of the time, plus
    # many weakly correlated coordinates that are individually tiny but
    # jointly predictive
    labels = rng.integers(0, 2, size=n)
    signs = 2.0 * labels - 1.0
    flip = np.where(rng.uniform(size=n) < robust_accuracy, 1.0, -1.0)
    robust = 0.5 + 0.4 * signs * flip
    weak = 0.5 + 0.05 * signs[:, None] + rng.normal(0.0, 0.1, size=(n, non_robust))
    inputs = np.concatenate([robust[:, None], weak], axis=1)
    return np.clip(inputs, 0.0, 1.0), labels


def gen_synthetic(kind: str, n: int, seed: int, **params) -> Dataset:
    """
    Generate a deterministic synthetic dataset.

    Args:
        kind: "two_gaussians", "xor_grid" or "robust_features"
        n: Number of examples (>= 2)
        seed: Random seed
        **params: Generator-specific options (cells, non_robust, robust_accuracy)

    Returns:
        Two-class Dataset with pixels in [0,1]
    """
    if n < 2:
        raise InvalidInputError(f"Need at least 2 examples, got n={n}")
    rng = np.random.default_rng(seed)
    generators = {
        "two_gaussians": _two_gaussians,
        "xor_grid": _xor_grid,
        "robust_features": _robust_features,
    }
    if kind not in generators:
        raise InvalidInputError(f"Unknown synthetic dataset '{kind}' (expected one of {SYNTHETIC_KINDS})")
    inputs, labels = generators[kind](rng, n, **params)
    logger.debug(f"Generated {kind}: n={n}, seed={seed}, dim={inputs.shape[1]}")
    return Dataset.from_arrays(inputs, labels, 2, kind)


def assign_targets(dataset: Dataset, seed: int) -> Dataset:
    """Draw y* uniformly from the L-1 classes other than y, deterministically per seed."""
    rng = np.random.default_rng(seed)
    labels = dataset.labels
    offsets = rng.integers(1, dataset.num_classes, size=len(labels))
    targets = (labels + offsets) % dataset.num_classes
    examples = tuple(LabeledExample(ex.x, ex.y, int(t)) for ex, t in zip(dataset.examples, targets))
    return Dataset(examples, dataset.num_classes, dataset.name, dataset.input_shape)


def split(dataset: Dataset, n_train: int, seed: int) -> Tuple[Dataset, Dataset]:
    """Shuffle and split into disjoint train and eval datasets."""
    if not 0 < n_train < len(dataset):
        raise InvalidInputError(f"n_train must be in (0, {len(dataset)}), got {n_train}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    train = dataset.subset(order[:n_train], f"{dataset.name}-train")
    evaluation = dataset.subset(order[n_train:], f"{dataset.name}-eval")
    return train, evaluation


# ---------------------------------------------------------------------------
# Run records and persistence
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    """Config snapshot, seed, per-example outcomes and curves of one benchmark run."""
    config: Dict[str, Any]
    seed: int
    outcomes: List[Dict[str, Any]] = field(default_factory=list)
    curves: List[Dict[str, Any]] = field(default_factory=list)
    clean_accuracy: Dict[str, float] = field(default_factory=dict)
    skipped: List[Dict[str, str]] = field(default_factory=list)
    wall_clock: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        # wall-clock timings are kept out so identical runs serialize identically
        return {
            "version": RECORD_VERSION,
            "config": self.config,
            "seed": self.seed,
            "outcomes": self.outcomes,
            "curves": self.curves,
            "clean_accuracy": self.clean_accuracy,
            "skipped": self.skipped,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        if data.get("version") != RECORD_VERSION:
            raise InvalidInputError(f"Unsupported run record version {data.get('version')}")
        return cls(
            config=data["config"],
            seed=data["seed"],
            outcomes=list(data.get("outcomes", [])),
            curves=list(data.get("curves", [])),
            clean_accuracy=dict(data.get("clean_accuracy", {})),
            skipped=list(data.get("skipped", [])),
        )

    def merge(self, other: "RunRecord"):
        """Append another record's cells (used when cells run separately)."""
        self.outcomes.extend(other.outcomes)
        self.curves.extend(other.curves)
        self.clean_accuracy.update(other.clean_accuracy)
        self.skipped.extend(other.skipped)
        self.wall_clock.update(other.wall_clock)


def dumps_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, indent=2, allow_nan=True) + "\n"


def save_json(data: Any, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(data))
    return path


def load_json(path: Union[str, Path]) -> Any:
    with open(path) as f:
        return json.load(f)


def save_run_record(record: RunRecord, out_dir: Union[str, Path]) -> Path:
    """Write results.json (deterministic) and timing.json (wall-clock) into out_dir."""
    out_dir = Path(out_dir)
    path = save_json(record.to_dict(), out_dir / "results.json")
    save_json(record.wall_clock, out_dir / "timing.json")
    logger.info(f"Run record saved to {path}")
    return path


def load_run_record(path: Union[str, Path]) -> RunRecord:
    path = Path(path)
    if path.is_dir():
        path = path / "results.json"
    return RunRecord.from_dict(load_json(path))


def format_float(value: float) -> str:
    return f"{value:.17g}"


def save_curve_csv(points: Sequence[Tuple[float, float, Optional[float]]], path: Union[str, Path]) -> Path:
    """
    Write curve points as CSV with header "abscissa,accuracy,asr".

    An undefined ASR is written as an empty field.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["abscissa", "accuracy", "asr"])
        for abscissa, acc, asr in points:
            writer.writerow([format_float(abscissa), format_float(acc),
                             "" if asr is None else format_float(asr)])
    return path


def load_curve_csv(path: Union[str, Path]) -> List[Tuple[float, float, Optional[float]]]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["abscissa", "accuracy", "asr"]:
            raise IdxFormatError(f"{path}: unexpected curve header {header}")
        return [(float(a), float(b), float(c) if c else None) for a, b, c in reader]

