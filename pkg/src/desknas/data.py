"""Synthetic 1-D classification task standing in for an image benchmark."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NOISE_SIGMA = 0.1
HARMONIC_GAIN = 0.5


@dataclass
class Split:
    inputs: np.ndarray  # (n, length) float64
    labels: np.ndarray  # (n,) int64
    split: str

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class SyntheticDataset:
    train: Split
    val: Split
    n_classes: int
    seed: int


def class_frequencies(n_classes: int) -> np.ndarray:
    """Base frequency of each class, in cycles per full-length window."""
    return 1.5 + 0.75 * np.arange(n_classes)


def _make_split(rng, n, n_classes, length, name):
    if n % n_classes:
        raise ValueError(f"{name} size {n} is not a multiple of n_classes={n_classes}")
    labels = np.repeat(np.arange(n_classes), n // n_classes)
    labels = labels[rng.permutation(n)]
    freqs = class_frequencies(n_classes)[labels][:, None]
    t = np.arange(length)[None, :] / length
    phase = rng.uniform(0.0, 2 * np.pi, size=(n, 2))
    x = np.sin(2 * np.pi * freqs * t + phase[:, :1])
    x += HARMONIC_GAIN * np.sin(2 * np.pi * 2 * freqs * t + phase[:, 1:])
    x += rng.normal(0.0, NOISE_SIGMA, size=x.shape)
    return Split(x, labels.astype(np.int64), name)


def gen_dataset(seed: int = 0, n_train: int = 4096, n_val: int = 1024, n_classes: int = 8,
                max_resolution: int = 32) -> SyntheticDataset:
    """Balanced sinusoid classes: base tone + first harmonic, random phases, Gaussian noise."""
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    rng = np.random.default_rng(seed)
    train = _make_split(rng, n_train, n_classes, max_resolution, "train")
    val = _make_split(rng, n_val, n_classes, max_resolution, "val")
    return SyntheticDataset(train, val, n_classes, seed)


def save_dataset(ds: SyntheticDataset, path) -> None:
    np.savez(path, x_train=ds.train.inputs, y_train=ds.train.labels, x_val=ds.val.inputs,
             y_val=ds.val.labels, n_classes=ds.n_classes, seed=ds.seed)


def load_dataset(path) -> SyntheticDataset:
    z = np.load(path)
    return SyntheticDataset(Split(z["x_train"], z["y_train"], "train"),
                            Split(z["x_val"], z["y_val"], "val"),
                            int(z["n_classes"]), int(z["seed"]))
