"""
Architectures and minibatch SGD training for the desk-scale classifiers.

Architectures:
- linear: flatten -> dense
- mlp:    flatten -> dense -> relu -> dense
- lenet:  conv3x3 -> relu -> avgpool -> conv3x3 -> relu -> avgpool -> flatten -> dense -> relu -> dense

These stand in for the much larger networks used by published defenses.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import InvalidInputError, TrainingDivergedError
from tensor_core import AvgPool2, Classifier, Conv3x3, Dense, Flatten, ReLU, loss_and_param_grads

try:
    from tqdm import tqdm
    HAS_TQDM = True
except ImportError:
    HAS_TQDM = False

logger = logging.getLogger(__name__)

ARCHITECTURES = ("linear", "mlp", "lenet")

# (model, inputs, labels, rng) -> inputs used for the gradient step
ExampleFn = Callable[[Classifier, np.ndarray, np.ndarray, np.random.Generator], np.ndarray]


def _he_dense(rng: np.random.Generator, n_out: int, n_in: int) -> Dense:
    weight = rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)
    return Dense(weight, np.zeros(n_out))


def _he_conv(rng: np.random.Generator, n_out: int, n_in: int) -> Conv3x3:
    kernels = rng.standard_normal((n_out, n_in, 3, 3)) * np.sqrt(2.0 / (9 * n_in))
    return Conv3x3(kernels, np.zeros(n_out))


def build_classifier(arch: str, input_shape: Sequence[int], num_classes: int,
                     seed: int = 0, hidden: int = 64, channels: Tuple[int, int] = (6, 12)) -> Classifier:
    """
    Build a freshly initialized classifier.

    Args:
        arch: "linear", "mlp" or "lenet"
        input_shape: Shape of one input
        num_classes: Number of classes L
        seed: Initialization seed
        hidden: Width of the hidden dense layer
        channels: Conv channel counts for lenet

    Returns:
        Classifier with He-initialized weights and zero biases
    """
    rng = np.random.default_rng(seed)
    input_shape = tuple(input_shape)
    flat = int(np.prod(input_shape))

    if arch == "linear":
        layers = [Flatten(), _he_dense(rng, num_classes, flat)]
    elif arch == "mlp":
        layers = [Flatten(), _he_dense(rng, hidden, flat), ReLU(), _he_dense(rng, num_classes, hidden)]
    elif arch == "lenet":
        if len(input_shape) != 3:
            raise InvalidInputError(f"lenet needs (C, H, W) inputs, got {input_shape}")
        c, h, w = input_shape
        c1, c2 = channels
        h2, w2 = ((h - 2) // 2 - 2) // 2, ((w - 2) // 2 - 2) // 2
        if h2 < 1 or w2 < 1:
            raise InvalidInputError(f"Input {input_shape} too small for lenet")
        layers = [
            _he_conv(rng, c1, c), ReLU(), AvgPool2(),
            _he_conv(rng, c2, c1), ReLU(), AvgPool2(), Flatten(),
            _he_dense(rng, hidden, c2 * h2 * w2), ReLU(),
            _he_dense(rng, num_classes, hidden),
        ]
    else:
        raise InvalidInputError(f"Unknown architecture '{arch}' (expected one of {ARCHITECTURES})")

    logger.debug(f"Built {arch} classifier for input {input_shape}, {num_classes} classes")
    return Classifier(layers, input_shape, num_classes)


@dataclass
class TrainingLog:
    """Per-epoch mean loss and training accuracy."""
    epochs: List[Dict[str, float]] = field(default_factory=list)

    def record(self, epoch: int, loss: float, accuracy: float):
        self.epochs.append({"epoch": epoch, "loss": loss, "accuracy": accuracy})

    @property
    def final_loss(self) -> Optional[float]:
        return self.epochs[-1]["loss"] if self.epochs else None

    def to_dict(self) -> dict:
        return {"epochs": list(self.epochs)}


class Trainer:
    """Minibatch SGD with momentum on cross-entropy."""

    def __init__(self, epochs: int = 10, lr: float = 0.05, momentum: float = 0.9,
                 batch_size: int = 32, seed: int = 0, progress: bool = False):
        """
        Initialize trainer.

        Args:
            epochs: Passes over the training set
            lr: Learning rate
            momentum: Heavy-ball momentum
            batch_size: Minibatch size
            seed: Seed for shuffling and example generation
            progress: Show a tqdm bar over epochs
        """
        if epochs < 0 or batch_size < 1:
            raise InvalidInputError(f"Invalid training settings: epochs={epochs}, batch_size={batch_size}")
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.seed = seed
        self.progress = progress
        logger.info(f"Trainer initialized: epochs={epochs}, lr={lr}, batch_size={batch_size}, seed={seed}")

    def fit(self, model: Classifier, inputs: np.ndarray, labels: np.ndarray,
            example_fn: Optional[ExampleFn] = None) -> Tuple[Classifier, TrainingLog]:
        """
        Train a classifier.

        Args:
            model: Initial classifier
            inputs: (N, ...) training inputs
            labels: N training labels
            example_fn: Optional hook replacing each minibatch before the step
                        (adversarial training plugs in here)

        Returns:
            Tuple of (trained classifier, training log)

        Raises:
            TrainingDivergedError: If the loss becomes NaN or infinite
        """
        inputs = np.asarray(inputs, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        rng = np.random.default_rng(self.seed)
        velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in model.params]
        log = TrainingLog()

        epochs = range(1, self.epochs + 1)
        iterator = tqdm(epochs, desc="Training") if (HAS_TQDM and self.progress) else epochs

        for epoch in iterator:
            order = rng.permutation(len(inputs))
            losses, correct = [], 0
            for start in range(0, len(order), self.batch_size):
                idx = order[start:start + self.batch_size]
                batch, batch_labels = inputs[idx], labels[idx]
                if example_fn is not None:
                    batch = example_fn(model, batch, batch_labels, rng)

                loss, grads = loss_and_param_grads(model, batch, batch_labels, "xent")
                if not np.isfinite(loss):
                    logger.error(f"Loss diverged at epoch {epoch}: {loss}")
                    raise TrainingDivergedError(epoch, loss)

                params = model.params
                for layer_params, layer_grads, layer_velocity in zip(params, grads, velocity):
                    for key, grad in layer_grads.items():
                        layer_velocity[key] = self.momentum * layer_velocity[key] - self.lr * grad
                        layer_params[key] = layer_params[key] + layer_velocity[key]
                model = model.with_params(params)

                losses.append(loss * len(idx))
                correct += int(np.sum(np.argmax(model.logits_batch(batch), axis=1) == batch_labels))

            mean_loss = float(np.sum(losses) / len(inputs))
            if not np.isfinite(mean_loss):
                raise TrainingDivergedError(epoch, mean_loss)
            accuracy = correct / len(inputs)
            log.record(epoch, mean_loss, accuracy)
            logger.debug(f"Epoch {epoch}: loss={mean_loss:.4f} accuracy={accuracy:.3f}")

        if log.epochs:
            logger.info(f"Training finished: loss={log.final_loss:.4f} "
                        f"accuracy={log.epochs[-1]['accuracy']:.3f}")
        return model, log


def natural_train(inputs: np.ndarray, labels: np.ndarray, arch: str, input_shape: Sequence[int],
                  num_classes: int, epochs: int = 10, lr: float = 0.05, batch_size: int = 32,
                  seed: int = 0, hidden: int = 64) -> Tuple[Classifier, TrainingLog]:
    """Train a classifier on clean data."""
    model = build_classifier(arch, input_shape, num_classes, seed=seed, hidden=hidden)
    trainer = Trainer(epochs=epochs, lr=lr, batch_size=batch_size, seed=seed)
    return trainer.fit(model, inputs, labels)
