"""MNIST loading from IDX files.

IDX files are big-endian: a magic word (0x00000803 for images, 0x00000801
for labels), one u32 per dimension, then unsigned bytes. Gzipped copies
(`.gz`) are read transparently.

Typical usage:
    from dpp_lib.mnist import load_mnist_split

    train = load_mnist_split(Path("data"), "train")
    print(train.images.shape)  # (60000, 28, 28)
"""

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
NUM_CLASSES = 10

SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(Exception):
    """Raised for a wrong magic, a truncated stream or mismatched counts."""

    pass


@dataclass
class Dataset:
    """Images scaled to [0, 1] and integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise IdxFormatError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return int(len(self.labels))

    def one_hot(self) -> np.ndarray:
        return np.eye(NUM_CLASSES, dtype=np.float32)[self.labels]

    def subset(self, count: int) -> "Dataset":
        return Dataset(self.images[:count], self.labels[:count])


def _read_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _parse_idx(data: bytes, expected_magic: int, path: Path) -> np.ndarray:
    if len(data) < 4:
        raise IdxFormatError(f"{path}: truncated at byte offset {len(data)}")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IdxFormatError(f"{path}: truncated at byte offset {len(data)}")
    shape: Tuple[int, ...] = struct.unpack(f">{ndim}I", data[4:header_end])
    expected = header_end + int(np.prod(shape))
    if len(data) < expected:
        raise IdxFormatError(
            f"{path}: truncated at byte offset {len(data)}, expected {expected} bytes"
        )
    payload = np.frombuffer(data, dtype=np.uint8, offset=header_end)
    return payload[: expected - header_end].reshape(shape)


def load_mnist_idx(images_path: Path, labels_path: Path) -> Dataset:
    """Read an image/label file pair.

    Raises:
        IdxFormatError: If a file is malformed or the counts disagree
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{images_path} holds {images.shape[0]} images but {labels_path} "
            f"holds {labels.shape[0]} labels"
        )
    if labels.size and int(labels.max()) >= NUM_CLASSES:
        raise IdxFormatError(f"{labels_path}: label {int(labels.max())} out of range")
    logger.debug("loaded %d items from %s", images.shape[0], images_path)
    return Dataset(
        images=images.astype(np.float32) / np.float32(255.0),
        labels=labels.astype(np.uint8),
    )


def _locate(data_dir: Path, name: str) -> Path:
    for candidate in (data_dir / name, data_dir / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{name} not found in {data_dir}")


def load_mnist_split(data_dir: Path, split: str) -> Dataset:
    """Load the canonical `train` or `test` split from `data_dir`."""
    if split not in SPLIT_FILES:
        raise ValueError(f"unknown split {split!r}")
    images_name, labels_name = SPLIT_FILES[split]
    data_dir = Path(data_dir)
    images_path = _locate(data_dir, images_name)
    return load_mnist_idx(images_path, _locate(data_dir, labels_name))


def mnist_available(data_dir: Path) -> bool:
    try:
        for images_name, labels_name in SPLIT_FILES.values():
            _locate(Path(data_dir), images_name)
            _locate(Path(data_dir), labels_name)
    except FileNotFoundError:
        return False
    return True
