"""
Model persistence: the ADVB binary format and its JSON mirror.

Binary layout (little-endian; counts and dims uint32, weights float64):

    b"ADVB"                     magic
    version     u32             currently 1
    layer_count u32
    per layer:
        kind    u8              1 dense, 2 conv, 3 relu, 4 flatten, 5 avgpool
        dense:  out, in (u32), weight[out*in], bias[out]
        conv:   out, in, 3, 3 (u32), kernels[out*in*9], bias[out]
    num_classes u32
    ndim u32, dims[ndim] u32    input shape

The writer is deterministic and the reader rejects trailing bytes, so
save(load(f)) reproduces well-formed files byte for byte.
"""

import base64
import logging
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from data_io import load_json, save_json
from errors import ModelFormatError
from tensor_core import AvgPool2, Classifier, Conv3x3, Dense, Flatten, ReLU

logger = logging.getLogger(__name__)

MAGIC = b"ADVB"
VERSION = 1

KIND_TAGS = {"dense": 1, "conv": 2, "relu": 3, "flatten": 4, "avgpool": 5}
TAG_KINDS = {tag: kind for kind, tag in KIND_TAGS.items()}


def _u32(*values: int) -> bytes:
    return np.asarray(values, dtype="<u4").tobytes()


def _f64(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


def _u8(value: int) -> bytes:
    return np.uint8(value).tobytes()


def model_to_bytes(model: Classifier) -> bytes:
    parts = [MAGIC, _u32(VERSION, len(model.layers))]
    for layer in model.layers:
        parts.append(_u8(KIND_TAGS[layer.kind]))
        if isinstance(layer, Dense):
            parts += [_u32(*layer.weight.shape), _f64(layer.weight), _f64(layer.bias)]
        elif isinstance(layer, Conv3x3):
            parts += [_u32(*layer.kernels.shape), _f64(layer.kernels), _f64(layer.bias)]
    parts.append(_u32(model.num_classes, len(model.input_shape), *model.input_shape))
    return b"".join(parts)


class _Reader:
    """Bounds-checked cursor over a byte string."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError(f"Truncated model file at byte {self.pos} (need {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self, count: int = 1) -> List[int]:
        return [int(v) for v in np.frombuffer(self.take(4 * count), dtype="<u4")]

    def f64(self, shape: Tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)


def model_from_bytes(data: bytes) -> Classifier:
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise ModelFormatError("Not an ADVB model file (bad magic)")
    version, layer_count = reader.u32(2)
    if version != VERSION:
        raise ModelFormatError(f"Unsupported model version {version}")

    layers = []
    for index in range(layer_count):
        tag = reader.u8()
        kind = TAG_KINDS.get(tag)
        try:
            if kind == "dense":
                shape = tuple(reader.u32(2))
                layers.append(Dense(reader.f64(shape), reader.f64(shape[:1])))
            elif kind == "conv":
                shape = tuple(reader.u32(4))
                layers.append(Conv3x3(reader.f64(shape), reader.f64(shape[:1])))
            elif kind == "relu":
                layers.append(ReLU())
            elif kind == "flatten":
                layers.append(Flatten())
            elif kind == "avgpool":
                layers.append(AvgPool2())
            else:
                raise ModelFormatError(f"Unknown layer kind tag {tag} at layer {index}")
        except ModelFormatError:
            raise
        except ValueError as e:
            raise ModelFormatError(f"Bad {kind} layer at index {index}: {e}")

    num_classes, ndim = reader.u32(2)
    input_shape = tuple(reader.u32(ndim))
    if reader.pos != len(data):
        raise ModelFormatError(f"{len(data) - reader.pos} trailing bytes after model")
    try:
        return Classifier(layers, input_shape, num_classes)
    except ValueError as e:
        raise ModelFormatError(f"Inconsistent model structure: {e}")


def save_model(model: Classifier, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(model_to_bytes(model))
    logger.info(f"Model saved to {path} ({len(model.layers)} layers)")
    return path


def load_model(path: Union[str, Path]) -> Classifier:
    """
    Load an ADVB model file.

    Raises:
        FileNotFoundError: If the file does not exist
        ModelFormatError: If the file is malformed
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Model file not found: {path}")
    model = model_from_bytes(path.read_bytes())
    logger.info(f"Loaded model from {path}: input {model.input_shape}, {model.num_classes} classes")
    return model


def model_to_json(model: Classifier) -> dict:
    """Readable mirror: structure in plain JSON, weights as base64 little-endian float64."""
    layers = []
    for layer in model.layers:
        entry = {"kind": layer.kind}
        for key, value in layer.params.items():
            entry[key] = {"shape": list(value.shape), "data": base64.b64encode(_f64(value)).decode("ascii")}
        layers.append(entry)
    return {"format": "ADVB", "version": VERSION, "input_shape": list(model.input_shape),
            "num_classes": model.num_classes, "layers": layers}


def model_from_json(data: dict) -> Classifier:
    if data.get("format") != "ADVB" or data.get("version") != VERSION:
        raise ModelFormatError(f"Unsupported model JSON ({data.get('format')} v{data.get('version')})")

    def array(entry: dict) -> np.ndarray:
        try:
            raw = base64.b64decode(entry["data"], validate=True)
            return np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        except (KeyError, ValueError) as e:
            raise ModelFormatError(f"Bad weight entry: {e}")

    builders = {
        "dense": lambda e: Dense(array(e["weight"]), array(e["bias"])),
        "conv": lambda e: Conv3x3(array(e["kernels"]), array(e["bias"])),
        "relu": lambda e: ReLU(),
        "flatten": lambda e: Flatten(),
        "avgpool": lambda e: AvgPool2(),
    }
    layers = []
    for entry in data.get("layers", []):
        if entry.get("kind") not in builders:
            raise ModelFormatError(f"Unknown layer kind '{entry.get('kind')}'")
        try:
            layers.append(builders[entry["kind"]](entry))
        except ModelFormatError:
            raise
        except (KeyError, ValueError) as e:
            raise ModelFormatError(f"Bad {entry['kind']} layer: {e}")
    try:
        return Classifier(layers, data["input_shape"], data["num_classes"])
    except (KeyError, ValueError) as e:
        raise ModelFormatError(f"Inconsistent model structure: {e}")


def save_model_json(model: Classifier, path: Union[str, Path]) -> Path:
    return save_json(model_to_json(model), path)


def load_model_json(path: Union[str, Path]) -> Classifier:
    return model_from_json(load_json(path))
