"""
Input transformations used by defenses and by the diverse-input attack.

Each transform maps [0,1]^d into [0,1]^d and, when applied through
`apply`, also returns the backward map of its true (naive) gradient:
quantizing transforms are piecewise constant, so their naive gradient is
zero almost everywhere; resize-and-pad is a linear pixel selection whose
gradient is an exact scatter.

Inputs are (C, H, W) images for the spatial transforms.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, ClassVar, Optional, Tuple

import numpy as np
from scipy.fft import dctn, idctn

from errors import InvalidInputError

logger = logging.getLogger(__name__)

Backward = Callable[[np.ndarray], np.ndarray]

# IJG luminance quantization table (quality 50)
JPEG_LUMINANCE_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

BLOCK = 8


def bit_depth_reduce(x, bits: int) -> np.ndarray:
    """
    Quantize each pixel to 2^bits levels: round(x * (2^bits - 1)) / (2^bits - 1).

    Args:
        x: Tensor with values in [0,1]
        bits: Bit depth in [1, 8]

    Returns:
        Quantized tensor
    """
    if not 1 <= bits <= 8:
        raise InvalidInputError(f"bits must be in [1, 8], got {bits}")
    levels = 2 ** bits - 1
    return np.round(np.asarray(x, dtype=np.float64) * levels) / levels


def quantization_table(quality: int) -> np.ndarray:
    """IJG quality scaling of the luminance table; quality 100 gives all ones."""
    if not 1 <= quality <= 100:
        raise InvalidInputError(f"JPEG quality must be in [1, 100], got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    table = np.floor((JPEG_LUMINANCE_TABLE * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


def _spatial_shape(x: np.ndarray) -> Tuple[int, int, int]:
    if x.ndim != 3:
        raise InvalidInputError(f"Spatial transform expects a (C, H, W) image, got shape {x.shape}")
    return x.shape


def jpeg_like(x, quality: int = 75) -> np.ndarray:
    """
    Lossy block-DCT compression of every channel, clamped to [0,1].

    Pixels are mapped to 0..255 and centered, split into 8x8 blocks (edge
    padded), transformed with the unnormalized DCT-II, divided by the scaled
    table, rounded, multiplied back and inverted. With the all-ones table the
    per-pixel error stays below half an 8-bit level.
    """
    x = np.asarray(x, dtype=np.float64)
    channels, height, width = _spatial_shape(x)
    table = quantization_table(quality)

    pad_h = (-height) % BLOCK
    pad_w = (-width) % BLOCK
    shifted = np.pad(x * 255.0 - 128.0, ((0, 0), (0, pad_h), (0, pad_w)), mode="edge")
    ph, pw = shifted.shape[1] // BLOCK, shifted.shape[2] // BLOCK

    blocks = shifted.reshape(channels, ph, BLOCK, pw, BLOCK).transpose(0, 1, 3, 2, 4)
    coeffs = dctn(blocks, type=2, axes=(-2, -1))
    quantized = np.round(coeffs / table) * table
    restored = idctn(quantized, type=2, axes=(-2, -1))
    restored = restored.transpose(0, 1, 3, 2, 4).reshape(channels, ph * BLOCK, pw * BLOCK)

    out = (restored[:, :height, :width] + 128.0) / 255.0
    return np.clip(out, 0.0, 1.0)


def sample_resize_pad(rng: np.random.Generator, size: int, min_ratio: float = 0.9):
    """
    Draw (rnd, top, left) for a size x size image.

    rnd is uniform over the integers in [ceil(min_ratio * size), size]; the
    padding offsets are uniform over the remaining space.
    """
    low = min(size, math.ceil(min_ratio * size))
    rnd = int(rng.integers(low, size + 1))
    top = int(rng.integers(0, size - rnd + 1))
    left = int(rng.integers(0, size - rnd + 1))
    return rnd, top, left


def _resize_indices(size: int, rnd: int) -> np.ndarray:
    # nearest-neighbour source index for each output pixel
    return np.minimum((np.arange(rnd) * size) // rnd, size - 1)


def resize_pad(x, rnd: int, top: int, left: int) -> Tuple[np.ndarray, Backward]:
    """
    Nearest-neighbour resize to rnd x rnd, zero-padded back to the input size.

    Returns:
        Tuple of (transformed image, exact backward map)
    """
    x = np.asarray(x, dtype=np.float64)
    channels, height, width = _spatial_shape(x)
    if height != width:
        raise InvalidInputError(f"Resize-and-pad expects square images, got {height}x{width}")
    rows = _resize_indices(height, rnd)[:, None]
    cols = _resize_indices(width, rnd)[None, :]

    out = np.zeros_like(x)
    out[:, top:top + rnd, left:left + rnd] = x[:, rows, cols]

    def backward(grad: np.ndarray) -> np.ndarray:
        d_input = np.zeros_like(x)
        np.add.at(d_input, (slice(None), rows, cols), grad[:, top:top + rnd, left:left + rnd])
        return d_input

    return out, backward


def random_resize_pad(x, seed: int, min_ratio: float = 0.9) -> np.ndarray:
    """Random resize-and-pad, deterministic per seed; padding pixels are exactly 0."""
    x = np.asarray(x, dtype=np.float64)
    _, height, _ = _spatial_shape(x)
    if height < 2:
        return x.copy()
    rnd, top, left = sample_resize_pad(np.random.default_rng(seed), height, min_ratio)
    out, _ = resize_pad(x, rnd, top, left)
    return out


def _zero_backward(x: np.ndarray) -> Backward:
    return lambda grad: np.zeros_like(x)


@dataclass(frozen=True)
class BitDepthReduction:
    bits: int = 3
    name: ClassVar[str] = "bit_depth"
    randomized: ClassVar[bool] = False
    differentiable: ClassVar[bool] = False

    def __post_init__(self):
        if not 1 <= self.bits <= 8:
            raise InvalidInputError(f"bits must be in [1, 8], got {self.bits}")

    def apply(self, x: np.ndarray, rng: Optional[np.random.Generator] = None):
        return bit_depth_reduce(x, self.bits), _zero_backward(x)

    def apply_batch(self, batch: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        return bit_depth_reduce(batch, self.bits)

    def to_dict(self) -> dict:
        return {"kind": self.name, "bits": self.bits}


@dataclass(frozen=True)
class JpegCompression:
    quality: int = 75
    name: ClassVar[str] = "jpeg"
    randomized: ClassVar[bool] = False
    differentiable: ClassVar[bool] = False

    def __post_init__(self):
        quantization_table(self.quality)

    def apply(self, x: np.ndarray, rng: Optional[np.random.Generator] = None):
        return jpeg_like(x, self.quality), _zero_backward(x)

    def apply_batch(self, batch: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        return np.stack([jpeg_like(x, self.quality) for x in batch])

    def to_dict(self) -> dict:
        return {"kind": self.name, "quality": self.quality}


@dataclass(frozen=True)
class RandomResizePad:
    min_ratio: float = 0.9
    name: ClassVar[str] = "resize_pad"
    randomized: ClassVar[bool] = True
    differentiable: ClassVar[bool] = True

    def apply(self, x: np.ndarray, rng: np.random.Generator):
        if rng is None:
            raise InvalidInputError("Randomized transform needs an explicit random generator")
        _, height, _ = _spatial_shape(x)
        if height < 2:
            return x.copy(), lambda grad: grad
        rnd, top, left = sample_resize_pad(rng, height, self.min_ratio)
        return resize_pad(x, rnd, top, left)

    def apply_batch(self, batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return np.stack([self.apply(x, rng)[0] for x in batch])

    def to_dict(self) -> dict:
        return {"kind": self.name, "min_ratio": self.min_ratio}


def build_transform(spec: dict):
    """Build a transform from a config entry such as {"kind": "jpeg", "quality": 75}."""
    params = dict(spec)
    kind = params.pop("kind", None)
    builders = {
        BitDepthReduction.name: BitDepthReduction,
        JpegCompression.name: JpegCompression,
        RandomResizePad.name: RandomResizePad,
    }
    if kind not in builders:
        raise InvalidInputError(f"Unknown transform '{kind}' (expected one of {sorted(builders)})")
    return builders[kind](**params)
