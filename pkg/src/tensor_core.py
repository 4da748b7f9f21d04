"""
Dense float64 tensors and a minimal differentiable classifier.

Layers work on batches with a leading example axis. The single-example
functions (forward, predict, the losses, grad_input) wrap the batched code.
Reverse mode is written out per layer, so input and parameter gradients are
exact rather than approximated.

Tensors are plain numpy float64 arrays; model weights are stored read-only
so a Classifier can be shared between concurrent attack runs.
"""

import dataclasses
import logging
from dataclasses import dataclass
from typing import Callable, ClassVar, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp, softmax

from errors import InvalidInputError

logger = logging.getLogger(__name__)

Tensor = np.ndarray
Shape = Tuple[int, ...]
ParamGrads = List[Dict[str, np.ndarray]]

LOSS_KINDS = ("xent", "margin", "cw_objective")


def as_tensor(values, shape: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    Convert values to a float64 tensor, validating shape and finiteness.

    Args:
        values: Array-like input
        shape: Required shape (optional)

    Returns:
        float64 numpy array

    Raises:
        InvalidInputError: On shape mismatch or NaN/Inf entries
    """
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        raise InvalidInputError(f"Expected shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("Tensor contains NaN or infinite values")
    return arr


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Dense:
    """Affine layer: out = a @ weight.T + bias."""
    weight: np.ndarray
    bias: np.ndarray
    kind: ClassVar[str] = "dense"

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen(self.weight))
        object.__setattr__(self, "bias", _frozen(self.bias))
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise InvalidInputError(
                f"Dense weight {self.weight.shape} and bias {self.bias.shape} do not match"
            )

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def replace(self, **params) -> "Dense":
        return dataclasses.replace(self, **params)

    def output_shape(self, in_shape: Shape) -> Shape:
        if tuple(in_shape) != (self.weight.shape[1],):
            raise InvalidInputError(f"dense expects ({self.weight.shape[1]},), got {tuple(in_shape)}")
        return (self.weight.shape[0],)

    def forward(self, a: np.ndarray):
        return a @ self.weight.T + self.bias, a

    def backward(self, grad: np.ndarray, cache):
        a = cache
        return grad @ self.weight, {"weight": grad.T @ a, "bias": grad.sum(axis=0)}


@dataclass(frozen=True, eq=False)
class Conv3x3:
    """3x3 convolution, stride 1, no padding. Kernels are (out, in, 3, 3)."""
    kernels: np.ndarray
    bias: np.ndarray
    kind: ClassVar[str] = "conv"

    def __post_init__(self):
        object.__setattr__(self, "kernels", _frozen(self.kernels))
        object.__setattr__(self, "bias", _frozen(self.bias))
        if self.kernels.ndim != 4 or self.kernels.shape[2:] != (3, 3):
            raise InvalidInputError(f"Conv kernels must be (out, in, 3, 3), got {self.kernels.shape}")
        if self.bias.shape != (self.kernels.shape[0],):
            raise InvalidInputError(f"Conv bias {self.bias.shape} does not match {self.kernels.shape[0]} kernels")

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return {"kernels": self.kernels, "bias": self.bias}

    def replace(self, **params) -> "Conv3x3":
        return dataclasses.replace(self, **params)

    def output_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3 or in_shape[0] != self.kernels.shape[1] or min(in_shape[1:]) < 3:
            raise InvalidInputError(
                f"conv expects ({self.kernels.shape[1]}, H>=3, W>=3), got {tuple(in_shape)}"
            )
        return (self.kernels.shape[0], in_shape[1] - 2, in_shape[2] - 2)

    def forward(self, a: np.ndarray):
        windows = sliding_window_view(a, (3, 3), axis=(2, 3))
        out = np.einsum("nchwij,ocij->nohw", windows, self.kernels, optimize=True)
        return out + self.bias[None, :, None, None], a

    def backward(self, grad: np.ndarray, cache):
        a = cache
        windows = sliding_window_view(a, (3, 3), axis=(2, 3))
        d_kernels = np.einsum("nohw,nchwij->ocij", grad, windows, optimize=True)
        d_bias = grad.sum(axis=(0, 2, 3))
        # Full correlation of the output gradient with the flipped kernels.
        padded = np.pad(grad, ((0, 0), (0, 0), (2, 2), (2, 2)))
        grad_windows = sliding_window_view(padded, (3, 3), axis=(2, 3))
        d_input = np.einsum(
            "nohwij,ocij->nchw", grad_windows, self.kernels[:, :, ::-1, ::-1], optimize=True
        )
        return d_input, {"kernels": d_kernels, "bias": d_bias}


@dataclass(frozen=True, eq=False)
class ReLU:
    kind: ClassVar[str] = "relu"

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return {}

    def replace(self, **params) -> "ReLU":
        return self

    def output_shape(self, in_shape: Shape) -> Shape:
        return tuple(in_shape)

    def forward(self, a: np.ndarray):
        mask = a > 0
        return np.where(mask, a, 0.0), mask

    def backward(self, grad: np.ndarray, cache):
        return grad * cache, {}


@dataclass(frozen=True, eq=False)
class Flatten:
    kind: ClassVar[str] = "flatten"

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return {}

    def replace(self, **params) -> "Flatten":
        return self

    def output_shape(self, in_shape: Shape) -> Shape:
        return (int(np.prod(in_shape)),)

    def forward(self, a: np.ndarray):
        return a.reshape(a.shape[0], -1), a.shape

    def backward(self, grad: np.ndarray, cache):
        return grad.reshape(cache), {}


@dataclass(frozen=True, eq=False)
class AvgPool2:
    """2x2 average pooling, stride 2. Odd trailing rows/columns are dropped."""
    kind: ClassVar[str] = "avgpool"

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return {}

    def replace(self, **params) -> "AvgPool2":
        return self

    def output_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3 or min(in_shape[1:]) < 2:
            raise InvalidInputError(f"avgpool expects (C, H>=2, W>=2), got {tuple(in_shape)}")
        return (in_shape[0], in_shape[1] // 2, in_shape[2] // 2)

    def forward(self, a: np.ndarray):
        n, c, h, w = a.shape
        ho, wo = h // 2, w // 2
        cropped = a[:, :, : 2 * ho, : 2 * wo]
        return cropped.reshape(n, c, ho, 2, wo, 2).mean(axis=(3, 5)), a.shape

    def backward(self, grad: np.ndarray, cache):
        d_input = np.zeros(cache)
        spread = np.repeat(np.repeat(grad, 2, axis=2), 2, axis=3) / 4.0
        d_input[:, :, : spread.shape[2], : spread.shape[3]] = spread
        return d_input, {}


Layer = Union[Dense, Conv3x3, ReLU, Flatten, AvgPool2]


# ---------------------------------------------------------------------------
# Classifier
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trace:
    """Forward result for one input plus a closure mapping d(loss)/d(logits) to d(loss)/dx."""
    logits: np.ndarray
    backward: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class Classifier:
    """Layer stack producing logits Z(x); immutable after construction."""
    layers: Tuple[Layer, ...]
    input_shape: Shape
    num_classes: int

    is_random: ClassVar[bool] = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.num_classes < 2:
            raise InvalidInputError(f"num_classes must be >= 2, got {self.num_classes}")

        shape = self.input_shape
        for index, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except InvalidInputError as e:
                raise InvalidInputError(f"Layer {index} ({layer.kind}) does not compose: {e}")
        if shape != (self.num_classes,):
            raise InvalidInputError(
                f"Model output shape {shape} does not match num_classes={self.num_classes}"
            )

    @property
    def params(self) -> ParamGrads:
        return [dict(layer.params) for layer in self.layers]

    def with_params(self, params: ParamGrads) -> "Classifier":
        """Return a new classifier with replaced parameters (same structure)."""
        layers = [layer.replace(**p) if p else layer for layer, p in zip(self.layers, params)]
        return Classifier(layers, self.input_shape, self.num_classes)

    def run(self, batch: np.ndarray):
        caches = []
        out = batch
        for layer in self.layers:
            out, cache = layer.forward(out)
            caches.append(cache)
        return out, caches

    def backprop(self, caches, grad: np.ndarray, need_params: bool = True):
        param_grads: ParamGrads = []
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad, layer_grads = layer.backward(grad, cache)
            param_grads.append(layer_grads if need_params else {})
        param_grads.reverse()
        return grad, param_grads

    def check_input(self, x) -> np.ndarray:
        return as_tensor(x, self.input_shape)

    def check_batch(self, batch) -> np.ndarray:
        arr = as_tensor(batch)
        if arr.shape[1:] != self.input_shape:
            raise InvalidInputError(
                f"Expected batch of shape (N,) + {self.input_shape}, got {arr.shape}"
            )
        return arr

    def trace(self, x, rng=None, substitute=None) -> Trace:
        """Differentiable view used by gradient oracles; rng/substitute are ignored."""
        batch = self.check_input(x)[None]
        out, caches = self.run(batch)

        def backward(dlogits: np.ndarray) -> np.ndarray:
            d_input, _ = self.backprop(caches, np.asarray(dlogits)[None], need_params=False)
            return d_input[0]

        return Trace(out[0], backward)

    def logits_batch(self, batch, rng=None) -> np.ndarray:
        out, _ = self.run(self.check_batch(batch))
        return out

    def log_probabilities(self, batch, rng=None) -> np.ndarray:
        logits = self.logits_batch(batch)
        return logits - logsumexp(logits, axis=1, keepdims=True)

    def predict_label(self, x, rng=None) -> int:
        return predict(self, x)


def linear_classifier(weight, bias, input_shape: Optional[Sequence[int]] = None) -> Classifier:
    """Flatten followed by a single dense layer."""
    weight = np.asarray(weight, dtype=np.float64)
    shape = tuple(input_shape) if input_shape is not None else (weight.shape[1],)
    return Classifier([Flatten(), Dense(weight, bias)], shape, weight.shape[0])


# ---------------------------------------------------------------------------
# Losses on logits
# ---------------------------------------------------------------------------

def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise InvalidInputError(f"Labels must lie in [0, {num_classes}), got {labels.tolist()}")
    return labels


def logit_losses(logits: np.ndarray, labels, loss_kind: str):
    """
    Per-example losses and their gradients with respect to the logits.

    Args:
        logits: (N, L) logits
        labels: N class indices
        loss_kind: "xent", "margin" or "cw_objective"

    Returns:
        Tuple of (values (N,), dlogits (N, L))
    """
    logits = np.atleast_2d(logits)
    n, num_classes = logits.shape
    labels = _check_labels(labels, num_classes)
    rows = np.arange(n)
    onehot = np.zeros_like(logits)
    onehot[rows, labels] = 1.0

    if loss_kind == "xent":
        values = logsumexp(logits, axis=1) - logits[rows, labels]
        return values, softmax(logits, axis=1) - onehot

    if loss_kind in ("margin", "cw_objective"):
        others = logits.copy()
        others[rows, labels] = -np.inf
        # argmax returns the lowest index among ties
        runner_up = np.argmax(others, axis=1)
        margins = logits[rows, labels] - logits[rows, runner_up]
        grads = onehot.copy()
        grads[rows, runner_up] -= 1.0
        if loss_kind == "margin":
            return margins, grads
        active = (margins > 0).astype(np.float64)
        return np.maximum(margins, 0.0), grads * active[:, None]

    raise InvalidInputError(f"Unknown loss kind '{loss_kind}' (expected one of {LOSS_KINDS})")


# ---------------------------------------------------------------------------
# Public single-example operations
# ---------------------------------------------------------------------------

def forward(model: Classifier, x) -> np.ndarray:
    """
    Compute logits Z(x) for a single input.

    Args:
        model: Classifier
        x: Input of shape model.input_shape

    Returns:
        Logits of length num_classes
    """
    out, _ = model.run(model.check_input(x)[None])
    return out[0]


def forward_batch(model: Classifier, batch) -> np.ndarray:
    return model.logits_batch(batch)


def predict(model: Classifier, x) -> int:
    """Argmax of the logits; ties go to the lowest index."""
    return int(np.argmax(forward(model, x)))


def loss_xent(model: Classifier, x, y: int) -> float:
    values, _ = logit_losses(forward(model, x)[None], [y], "xent")
    return float(values[0])


def loss_margin(model: Classifier, x, y: int) -> float:
    """Z(x)_y - max_{i != y} Z(x)_i; positive iff correctly classified with a strict margin."""
    values, _ = logit_losses(forward(model, x)[None], [y], "margin")
    return float(values[0])


def grad_input(model: Classifier, x, y: int, loss_kind: str = "xent") -> np.ndarray:
    """
    Exact gradient of the chosen loss with respect to the input.

    Args:
        model: Classifier
        x: Input of shape model.input_shape
        y: Label the loss is computed against
        loss_kind: "xent", "margin" or "cw_objective"

    Returns:
        Gradient with the same shape as x
    """
    tr = model.trace(x)
    _, dlogits = logit_losses(tr.logits[None], [y], loss_kind)
    return tr.backward(dlogits[0])


def input_gradients(model: Classifier, batch, labels, loss_kind: str = "xent"):
    """Per-example losses and input gradients for a batch."""
    batch = model.check_batch(batch)
    out, caches = model.run(batch)
    values, dlogits = logit_losses(out, labels, loss_kind)
    d_input, _ = model.backprop(caches, dlogits, need_params=False)
    return values, d_input


def loss_and_param_grads(model: Classifier, batch, labels, loss_kind: str = "xent"):
    """Mean loss over a batch and the matching mean parameter gradients."""
    batch = model.check_batch(batch)
    if batch.shape[0] == 0:
        raise InvalidInputError("Batch must not be empty")
    out, caches = model.run(batch)
    values, dlogits = logit_losses(out, labels, loss_kind)
    _, grads = model.backprop(caches, dlogits / batch.shape[0])
    return float(values.mean()), grads


def grad_params(model: Classifier, batch, loss_kind: str = "xent") -> ParamGrads:
    """
    Mean parameter gradient over a batch.

    Args:
        model: Classifier
        batch: Tuple (inputs (N, ...), labels (N,))
        loss_kind: Loss to differentiate

    Returns:
        One dict per layer with gradients keyed like Classifier.params
    """
    inputs, labels = batch
    _, grads = loss_and_param_grads(model, inputs, labels, loss_kind)
    return grads
