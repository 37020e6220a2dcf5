"""Shared oracles and fixtures-on-disk for the test suite."""

import gzip
import itertools
import struct
from pathlib import Path
from typing import Callable

import numpy as np

from dpp_lib.mnist import IMAGES_MAGIC, LABELS_MAGIC


def numerical_gradient(
    fn: Callable[[np.ndarray], float], point: np.ndarray, eps: float = 1e-6
) -> np.ndarray:
    """Central finite differences of a scalar function, entry by entry."""
    grad = np.zeros_like(point, dtype=np.float64)
    flat = point.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        upper = fn(point)
        flat[i] = original - eps
        lower = fn(point)
        flat[i] = original
        grad.reshape(-1)[i] = (upper - lower) / (2 * eps)
    return grad


def relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    scale = np.linalg.norm(actual) + np.linalg.norm(expected)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(actual - expected) / scale)


def plackett_luce_marginals(logits: np.ndarray, k: int) -> np.ndarray:
    """Exact inclusion probabilities of top-K without replacement."""
    weights = np.exp(logits.astype(np.float64))
    marginals = np.zeros(len(weights))
    for ordered in itertools.permutations(range(len(weights)), k):
        probability, remaining = 1.0, weights.sum()
        for item in ordered:
            probability *= weights[item] / remaining
            remaining -= weights[item]
        marginals[list(ordered)] += probability
    return marginals


def write_idx(
    path: Path, magic: int, array: np.ndarray, compress: bool = False
) -> Path:
    header = struct.pack(">I", magic) + b"".join(
        struct.pack(">I", extent) for extent in array.shape
    )
    data = header + array.astype(np.uint8).tobytes()
    if compress:
        path = path.with_name(path.name + ".gz")
        path.write_bytes(gzip.compress(data))
    else:
        path.write_bytes(data)
    return path


def write_mnist_dir(
    data_dir: Path,
    train_count: int = 64,
    test_count: int = 32,
    seed: int = 0,
) -> Path:
    """Synthetic MNIST-shaped IDX files where each class lights one band."""
    rng = np.random.default_rng(seed)
    data_dir.mkdir(parents=True, exist_ok=True)
    for split, count in (("train", train_count), ("t10k", test_count)):
        split_labels = rng.integers(0, 10, count)
        images = rng.integers(0, 40, size=(count, 28, 28))
        for index, label in enumerate(split_labels):
            images[index, 2 * int(label) : 2 * int(label) + 3, :] = 255
        write_idx(data_dir / f"{split}-images-idx3-ubyte", IMAGES_MAGIC, images)
        write_idx(
            data_dir / f"{split}-labels-idx1-ubyte",
            LABELS_MAGIC,
            np.asarray(split_labels),
        )
    return data_dir
