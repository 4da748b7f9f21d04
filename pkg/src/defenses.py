"""
Desk-scale defenses: robust training, input transformation, randomization
and ensembles.

A DefendedModel wraps one or more base classifiers behind a pipeline of
input transforms and optional Gaussian input noise. Its forward pass always
yields L log-probabilities; when more than one member or noise draw is
involved the member softmax outputs are averaged (the mean_probs rule) and
the log of the mean is reported as the logits.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from data_io import Dataset
from errors import ConfigError, InvalidInputError
from input_transforms import bit_depth_reduce, build_transform, jpeg_like, random_resize_pad
from tensor_core import Classifier, Trace, input_gradients
from threat import Norm, ThreatSpec, clip_box
from trainer import Trainer, TrainingLog, build_classifier

logger = logging.getLogger(__name__)

# Maps d(loss)/d(transform output) to d(loss)/d(transform input) in place of
# the true backward of a non-differentiable stage.
Substitute = Callable[[np.ndarray], np.ndarray]

TINY = 1e-300


def identity_substitute(grad: np.ndarray) -> np.ndarray:
    return grad


@dataclass(frozen=True, eq=False)
class DefendedModel:
    """Base classifier(s) behind input transforms, input noise and probability averaging."""
    members: Tuple[Classifier, ...]
    transforms: Tuple = ()
    noise_sigma: float = 0.0
    noise_samples: int = 1
    name: str = "defended"

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        object.__setattr__(self, "transforms", tuple(self.transforms))
        if not self.members:
            raise ConfigError(f"Defense '{self.name}' needs at least one member model")
        first = self.members[0]
        for member in self.members[1:]:
            if member.num_classes != first.num_classes:
                raise ConfigError(
                    f"Defense '{self.name}': ensemble members disagree on the number of classes "
                    f"({member.num_classes} vs {first.num_classes})"
                )
            if member.input_shape != first.input_shape:
                raise ConfigError(f"Defense '{self.name}': ensemble members disagree on input shape")
        if self.noise_sigma < 0 or self.noise_samples < 1:
            raise ConfigError(
                f"Defense '{self.name}': invalid noise settings sigma={self.noise_sigma} k={self.noise_samples}"
            )

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return self.members[0].input_shape

    @property
    def num_classes(self) -> int:
        return self.members[0].num_classes

    @property
    def is_random(self) -> bool:
        return self.noise_sigma > 0 or any(t.randomized for t in self.transforms)

    @property
    def has_non_differentiable(self) -> bool:
        return any(not t.differentiable for t in self.transforms)

    @property
    def draws(self) -> int:
        return self.noise_samples if self.noise_sigma > 0 else 1

    @property
    def averages(self) -> bool:
        return len(self.members) > 1 or self.draws > 1

    def _require_rng(self, rng: Optional[np.random.Generator]) -> np.random.Generator:
        if rng is None:
            if self.is_random:
                raise InvalidInputError(f"Randomized defense '{self.name}' needs an explicit random generator")
            return np.random.default_rng(0)
        return rng

    def _preprocess(self, x: np.ndarray, rng: np.random.Generator,
                    substitute: Optional[Substitute]) -> Tuple[np.ndarray, Callable]:
        backwards = []
        z = x
        for transform in self.transforms:
            z, backward = transform.apply(z, rng)
            if substitute is not None and not transform.differentiable:
                backward = substitute
            backwards.append(backward)

        if self.noise_sigma > 0:
            noisy = z + self.noise_sigma * rng.standard_normal(z.shape)
            inside = ((noisy > 0.0) & (noisy < 1.0)).astype(np.float64)
            z = np.clip(noisy, 0.0, 1.0)
            backwards.append(lambda grad: grad * inside)

        def backward(grad: np.ndarray) -> np.ndarray:
            for step in reversed(backwards):
                grad = step(grad)
            return grad

        return z, backward

    def trace(self, x, rng: Optional[np.random.Generator] = None,
              substitute: Optional[Substitute] = None) -> Trace:
        """
        One randomness draw of the forward pass with its backward closure.

        Args:
            x: Input of shape input_shape
            rng: Generator for the defense's randomness
            substitute: Backward map used in place of non-differentiable transforms

        Returns:
            Trace whose logits are log-probabilities when averaging applies
        """
        x = self.members[0].check_input(x)
        rng = self._require_rng(rng)

        parts = []
        for _ in range(self.draws):
            z, pre_backward = self._preprocess(x, rng, substitute)
            for member in self.members:
                parts.append((member.trace(z), pre_backward))

        if not self.averages:
            tr, pre_backward = parts[0]
            return Trace(tr.logits, lambda dlogits: pre_backward(tr.backward(dlogits)))

        probs = [softmax(tr.logits) for tr, _ in parts]
        mean = np.mean(probs, axis=0)
        logits = np.log(np.maximum(mean, TINY))
        count = len(parts)

        def backward(dlogits: np.ndarray) -> np.ndarray:
            dmean = np.asarray(dlogits) / np.maximum(mean, TINY)
            total = np.zeros_like(x)
            for (tr, pre_backward), p in zip(parts, probs):
                dmember = p * (dmean - np.dot(p, dmean)) / count
                total += pre_backward(tr.backward(dmember))
            return total

        return Trace(logits, backward)

    def probabilities(self, batch, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """(N, L) probability vectors for a batch, one randomness draw per example and noise sample."""
        batch = self.members[0].check_batch(batch)
        rng = self._require_rng(rng)
        total = np.zeros((len(batch), self.num_classes))
        for _ in range(self.draws):
            z = batch
            for transform in self.transforms:
                z = transform.apply_batch(z, rng)
            if self.noise_sigma > 0:
                z = np.clip(z + self.noise_sigma * rng.standard_normal(z.shape), 0.0, 1.0)
            for member in self.members:
                total += softmax(member.logits_batch(z), axis=1)
        return total / (self.draws * len(self.members))

    def log_probabilities(self, batch, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        if not self.averages and not self.transforms:
            return self.members[0].log_probabilities(batch)
        return np.log(np.maximum(self.probabilities(batch, rng), TINY))

    def predict_label(self, x, rng: Optional[np.random.Generator] = None) -> int:
        return int(np.argmax(self.log_probabilities(np.asarray(x)[None], rng)[0]))

    def describe(self) -> dict:
        return {
            "name": self.name,
            "members": len(self.members),
            "transforms": [t.to_dict() for t in self.transforms],
            "noise_sigma": self.noise_sigma,
            "noise_samples": self.noise_samples,
        }


def as_defended(model, name: str = "natural") -> DefendedModel:
    if isinstance(model, DefendedModel):
        return model
    return DefendedModel((model,), name=name)


def noise_ensemble_forward(model: Classifier, x, sigma_n: float, k: int, seed: int) -> np.ndarray:
    """
    Mean softmax output over k Gaussian input-noise draws.

    Args:
        model: Base classifier
        x: Input
        sigma_n: Noise standard deviation (0 gives the plain softmax)
        k: Number of noise draws (>= 1)
        seed: Seed of the noise draws

    Returns:
        Probability vector of length L
    """
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    defended = DefendedModel((model,), noise_sigma=sigma_n, noise_samples=k, name="noise_ensemble")
    return defended.probabilities(np.asarray(x)[None], np.random.default_rng(seed))[0]


def ensemble_mean(models: Sequence[Classifier], x) -> np.ndarray:
    """Arithmetic mean of the member softmax outputs."""
    defended = DefendedModel(tuple(models), name="ensemble")
    return defended.probabilities(np.asarray(x)[None])[0]


def _project_batch(adv: np.ndarray, clean: np.ndarray, spec: ThreatSpec) -> np.ndarray:
    delta = adv - clean
    if spec.norm is Norm.LINF:
        delta = np.clip(delta, -spec.eps, spec.eps)
    else:
        flat = delta.reshape(len(delta), -1)
        lengths = np.linalg.norm(flat, axis=1)
        scale = np.minimum(1.0, spec.eps / np.maximum(lengths, TINY))
        delta = (flat * scale[:, None]).reshape(delta.shape)
    return clip_box(clean + delta, spec)


def _direction_batch(grads: np.ndarray, norm: Norm) -> np.ndarray:
    if norm is Norm.LINF:
        return np.sign(grads)
    flat = grads.reshape(len(grads), -1)
    lengths = np.linalg.norm(flat, axis=1)
    safe = np.where(lengths > 0, lengths, 1.0)
    return (flat / safe[:, None]).reshape(grads.shape)


def pgd_examples(model: Classifier, inputs: np.ndarray, labels: np.ndarray, spec: ThreatSpec,
                 iters: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Batched BIM with a uniform random start inside the eps-ball."""
    if spec.eps == 0:
        return inputs
    if spec.norm is Norm.LINF:
        start = rng.uniform(-spec.eps, spec.eps, size=inputs.shape)
    else:
        flat = rng.standard_normal((len(inputs), int(np.prod(inputs.shape[1:]))))
        flat /= np.maximum(np.linalg.norm(flat, axis=1, keepdims=True), TINY)
        radius = spec.eps * rng.uniform(size=(len(inputs), 1)) ** (1.0 / flat.shape[1])
        start = (flat * radius).reshape(inputs.shape)
    adv = clip_box(inputs + start, spec)
    for _ in range(iters):
        _, grads = input_gradients(model, adv, labels, "xent")
        adv = _project_batch(adv + alpha * _direction_batch(grads, spec.norm), inputs, spec)
    return adv


def adversarial_train(dataset: Dataset, arch: str, spec: ThreatSpec, attack_iters: int = 7,
                      alpha: Optional[float] = None, epochs: int = 10, seed: int = 0,
                      lr: float = 0.05, batch_size: int = 32, hidden: int = 64,
                      progress: bool = False) -> Tuple[Classifier, TrainingLog]:
    """
    Train on adversarial counterparts of every minibatch.

    Each minibatch is replaced by BIM examples inside the eps-ball (random
    start, `attack_iters` steps of size alpha) before the gradient step.
    With eps = 0 this is natural training.

    Args:
        dataset: Training split (disjoint from the evaluation split)
        arch: Architecture name
        spec: Threat spec giving the training norm and eps
        attack_iters: Inner attack iterations
        alpha: Inner step size (default 2.5 * eps / attack_iters)
        epochs: Training epochs
        seed: Seed for initialization, shuffling and random starts

    Returns:
        Tuple of (trained classifier, training log)

    Raises:
        TrainingDivergedError: If the loss becomes NaN or infinite
    """
    if attack_iters < 1:
        raise InvalidInputError(f"attack_iters must be >= 1, got {attack_iters}")
    step = alpha if alpha is not None else 2.5 * spec.eps / attack_iters
    logger.info(f"Adversarial training: arch={arch}, norm={spec.norm.value}, eps={spec.eps}, "
                f"iters={attack_iters}, alpha={step}, seed={seed}")

    def example_fn(model, inputs, labels, rng):
        return pgd_examples(model, inputs, labels, spec, attack_iters, step, rng)

    model = build_classifier(arch, dataset.input_shape, dataset.num_classes, seed=seed, hidden=hidden)
    trainer = Trainer(epochs=epochs, lr=lr, batch_size=batch_size, seed=seed, progress=progress)
    return trainer.fit(model, dataset.inputs, dataset.labels, example_fn=example_fn)


@dataclass
class DefenseSpec:
    """Config entry describing a defense by its base models and pipeline."""
    name: str
    models: List[str]
    transforms: List[dict] = field(default_factory=list)
    noise_sigma: float = 0.0
    noise_samples: int = 10


def build_defense(spec: DefenseSpec, trained: dict) -> DefendedModel:
    """
    Assemble a DefendedModel from trained base models.

    Args:
        spec: Defense description
        trained: Mapping of model name -> Classifier

    Returns:
        DefendedModel
    """
    missing = [m for m in spec.models if m not in trained]
    if missing:
        raise ConfigError(f"Defense '{spec.name}' refers to unknown models {missing}")
    try:
        transforms = tuple(build_transform(t) for t in spec.transforms)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Defense '{spec.name}': {e}")
    defended = DefendedModel(
        tuple(trained[m] for m in spec.models),
        transforms,
        noise_sigma=spec.noise_sigma,
        noise_samples=spec.noise_samples if spec.noise_sigma > 0 else 1,
        name=spec.name,
    )
    logger.info(f"Built defense '{spec.name}': {defended.describe()}")
    return defended
