"""Synthetic three-class image families for desk-scale experiments.

Classes are parametric textures whose identity lives in spatial structure
(which survives LayerNorm) rather than global brightness (which does not):

* class 0 — a Gaussian blob at a jittered position/size,
* class 1 — an oriented sinusoidal grating (near-axis angles),
* class 2 — a soft checkerboard.

Every image adds a strong class-irrelevant carrier grating (oblique, in a
fixed angle band away from class 1's) and pixel noise, and draws its class
signal amplitude from a wide range; weak-amplitude samples sit close to the
decision boundary, so quantization noise has something real to break. The
training split may also contain rare bright "specks" (tiny saturated
regions), the kind of outlier event a percentile or clipped calibration is
supposed to absorb; the evaluation split is speck-free.

Images are roughly zero-centered and stored at float32 precision (widened
to float64 in memory) so datasets round-trip bit-exactly through the
manifest+blob format.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

IMAGE_SIZE = 32
CHANNELS = 3
CLASSES = 3

TRAIN_SPLIT = "train"
CALIB_SPLIT = "calib"
EVAL_SPLIT = "eval"

AMP_RANGE = (0.10, 0.80)
CARRIER_AMP = 0.5
PIXEL_NOISE = 0.1
TRAIN_SPECK_RATE = 0.04


@dataclass
class LabeledDataset:
    """Images with integer class labels and a split tag."""

    images: np.ndarray  # [n, H, W, C] float64 (float32-representable)
    labels: np.ndarray  # [n] int64
    split: str = TRAIN_SPLIT

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ContractError("images and labels length mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= CLASSES):
            raise ContractError(f"labels must lie in [0, {CLASSES})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices, split: str | None = None) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices],
                              split or self.split)


def _blob(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    cy = rng.uniform(10, IMAGE_SIZE - 10)
    cx = rng.uniform(10, IMAGE_SIZE - 10)
    sigma = rng.uniform(3.0, 6.0)
    amp = rng.uniform(0.8, 1.2)
    return amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma)) - 0.25


def _stripes(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    theta = rng.uniform(-0.5, 0.5)
    freq = rng.uniform(0.15, 0.25)
    phase = rng.uniform(0, 2 * np.pi)
    t = xx * np.cos(theta) + yy * np.sin(theta)
    return rng.uniform(0.8, 1.2) * np.sin(2 * np.pi * freq * t + phase)


def _checker(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    freq = rng.uniform(0.08, 0.14)
    p1 = rng.uniform(0, 2 * np.pi)
    p2 = rng.uniform(0, 2 * np.pi)
    cells = np.sin(2 * np.pi * freq * xx + p1) * np.sin(2 * np.pi * freq * yy + p2)
    return rng.uniform(0.8, 1.2) * np.tanh(3.0 * cells)


_FAMILIES = (_blob, _stripes, _checker)


def generate_toy_dataset(seed: int, n_per_class: int, split: str = TRAIN_SPLIT,
                         speck_rate: float = 0.0,
                         amp_range: tuple[float, float] = AMP_RANGE,
                         carrier_amp: float = CARRIER_AMP,
                         noise: float = PIXEL_NOISE) -> LabeledDataset:
    """Deterministic class-balanced synthetic dataset.

    The same arguments always produce bit-identical data; classes are
    interleaved so any prefix stays roughly balanced.
    """
    if n_per_class < 1:
        raise ContractError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    images = []
    labels = []
    for _ in range(n_per_class):
        for label, family in enumerate(_FAMILIES):
            pattern = family(rng, yy, xx)
            amp = rng.uniform(*amp_range)
            theta = rng.uniform(np.deg2rad(50), np.deg2rad(70)) * rng.choice([-1.0, 1.0])
            freq = rng.uniform(0.12, 0.3)
            phase = rng.uniform(0, 2 * np.pi)
            carrier = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
            gains = rng.uniform(0.8, 1.2, size=CHANNELS)
            img = (amp * pattern + carrier_amp * carrier)[..., None] * gains
            img += rng.normal(0.0, noise, size=img.shape)
            if rng.uniform() < speck_rate:
                sy, sx = rng.integers(0, IMAGE_SIZE - 2, 2)
                ch = rng.integers(0, CHANNELS)
                img[sy:sy + 2, sx:sx + 2, ch] += rng.uniform(3.0, 6.0) * rng.choice([-1.0, 1.0])
            images.append(np.float64(np.float32(img)))
            labels.append(label)
    return LabeledDataset(np.stack(images), np.asarray(labels), split)


def default_splits(seed: int, train_per_class: int, eval_per_class: int,
                   calib_size: int) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """The standard train/calib/eval triple.

    Calibration images are sampled from the training split without
    replacement (so they may contain speck outliers); the evaluation split
    is speck-free.
    """
    train = generate_toy_dataset(seed, train_per_class, TRAIN_SPLIT,
                                 speck_rate=TRAIN_SPECK_RATE)
    eval_ds = generate_toy_dataset(seed + 1, eval_per_class, EVAL_SPLIT)
    if calib_size > len(train):
        raise ContractError(f"calib_size {calib_size} exceeds training set {len(train)}")
    rng = np.random.default_rng(seed + 2)
    chosen = np.sort(rng.choice(len(train), size=calib_size, replace=False))
    return train, train.subset(chosen, CALIB_SPLIT), eval_ds
