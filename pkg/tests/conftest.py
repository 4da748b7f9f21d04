import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from data_io import Dataset, gen_synthetic, split  # noqa: E402
from tensor_core import linear_classifier  # noqa: E402
from trainer import natural_train  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def diagonal_model():
    """Two-class linear model predicting class 1 iff x0 > x1 (logits 0 and x0 - x1)."""
    return linear_classifier([[0.0, 0.0], [1.0, -1.0]], [0.0, 0.0])


@pytest.fixture
def diagonal_data():
    """Six 2-d points around the x0 = x1 diagonal, labelled by the side they lie on."""
    inputs = np.array([
        [0.70, 0.30],
        [0.60, 0.45],
        [0.55, 0.50],
        [0.30, 0.70],
        [0.40, 0.55],
        [0.45, 0.50],
    ])
    labels = np.array([1, 1, 1, 0, 0, 0])
    return Dataset.from_arrays(inputs, labels, 2, "diagonal", targets=1 - labels)


@pytest.fixture(scope="session")
def gaussians():
    return gen_synthetic("two_gaussians", 240, seed=3)


@pytest.fixture(scope="session")
def gaussian_split(gaussians):
    return split(gaussians, 200, seed=3)


@pytest.fixture(scope="session")
def trained_mlp(gaussian_split):
    train, _ = gaussian_split
    model, _ = natural_train(train.inputs, train.labels, "mlp", train.input_shape, 2,
                             epochs=15, lr=0.05, batch_size=16, seed=1, hidden=16)
    return model
