"""MNIST ingestion from IDX files, deterministic batching and a synthetic
XOR set for running without MNIST on disk."""
import gzip
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import numpy.typing as npt

from .numerics import Matrix, Rng, ShapeError

logger = logging.getLogger(__name__)

# IDX layout (big endian):
#   0000  u8 0, u8 0, u8 dtype (0x08 = unsigned byte), u8 ndim
#   0004  i32 size of each dimension
#   ....  data, row-major
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"

DATA_DIR_ENV = "FALIGN_DATA_DIR"
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
MNIST_CLASSES = 10


class IdxFormatError(ValueError):
    """Malformed IDX content; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DataUnavailableError(FileNotFoundError):
    """Raised when the MNIST files cannot be found."""


@dataclass(frozen=True)
class Dataset:
    """``images`` holds one example per column, entries in [0, 1]."""

    images: Matrix
    labels: npt.NDArray[np.int64]
    n_classes: int = MNIST_CLASSES

    def __post_init__(self):
        if self.images.ndim != 2 or self.images.shape[1] != len(self.labels):
            raise ShapeError(f"{len(self.labels)} labels for images of shape {self.images.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes - 1}]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class Batch:
    inputs: Matrix
    onehot: Matrix
    labels: npt.NDArray[np.int64]
    indices: npt.NDArray[np.int64]


@dataclass(frozen=True)
class BatchPlan:
    """Shuffled batching; epoch ``e`` is permuted with seed ``seed ^ e``.

    The last batch of an epoch is kept even when it is short.
    """

    seed: int
    batch_size: int

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch size must be positive, got {self.batch_size}")

    def permutation(self, epoch: int, n: int) -> npt.NDArray[np.int64]:
        return Rng(self.seed ^ epoch).permutation(n)

    def batches_per_epoch(self, n: int) -> int:
        return -(-n // self.batch_size)


def one_hot(labels: npt.NDArray[np.integer], n_classes: int) -> Matrix:
    out = np.zeros((n_classes, len(labels)), dtype=np.float64)
    out[labels, np.arange(len(labels))] = 1.0
    return out


def batches(plan: BatchPlan, data: Dataset, epoch: int = 0) -> Iterator[Batch]:
    if len(data) == 0:
        raise ValueError("cannot batch an empty dataset")
    order = plan.permutation(epoch, len(data))
    for start in range(0, len(data), plan.batch_size):
        idx = order[start:start + plan.batch_size]
        labels = data.labels[idx]
        yield Batch(data.images[:, idx], one_hot(labels, data.n_classes), labels, idx)


def _read_bytes(path: str | Path) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == GZIP_MAGIC:
        raw = gzip.decompress(raw)
    return raw


def _parse_header(raw: bytes) -> tuple[int, tuple[int, ...], int]:
    if len(raw) < 4:
        raise IdxFormatError("file too short for an IDX magic number", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IMAGE_MAGIC, LABEL_MAGIC):
        raise IdxFormatError(f"unexpected IDX magic 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxFormatError(f"truncated header for {ndim} dimensions", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = header_len + int(np.prod(dims))
    if len(raw) != expected:
        raise IdxFormatError(f"payload size does not match dimensions {dims}: expected {expected} bytes, got {len(raw)}",
                             min(len(raw), expected))
    return magic, dims, header_len


def idx_header(path: str | Path) -> tuple[int, tuple[int, ...]]:
    """Magic number and dimensions of an IDX file."""
    magic, dims, _ = _parse_header(_read_bytes(path))
    return magic, dims


def load_idx(path: str | Path) -> Matrix | npt.NDArray[np.int64]:
    """Parse an IDX file.

    Images come back as a ``rows*cols x N`` float matrix scaled to [0, 1];
    labels as an int64 vector. Gzip-compressed files are detected by their
    magic bytes.
    """
    raw = _read_bytes(path)
    magic, dims, offset = _parse_header(raw)
    payload = np.frombuffer(raw, dtype=np.uint8, offset=offset)
    if magic == IMAGE_MAGIC:
        count = dims[0]
        pixels = int(np.prod(dims[1:]))
        logger.debug(f"Loaded {count} images of {dims[1:]} from {path}")
        return payload.reshape(count, pixels).T.astype(np.float64) / 255.0
    return payload.astype(np.int64)


def write_idx(path: str | Path, array: npt.ArrayLike) -> None:
    """Write a uint8 array as IDX: 3-D arrays as images, 1-D as labels."""
    a = np.asarray(array)
    if a.ndim == 3:
        magic = IMAGE_MAGIC
    elif a.ndim == 1:
        magic = LABEL_MAGIC
    else:
        raise ShapeError(f"IDX writer takes 3-D images or 1-D labels, got shape {a.shape}")
    if a.min(initial=0) < 0 or a.max(initial=0) > 255:
        raise ValueError("IDX payload must fit in unsigned bytes")
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{a.ndim}I", *a.shape))
        f.write(a.astype(np.uint8).tobytes())


def resolve_data_dir(flag: Optional[str | Path] = None) -> Path:
    """The ``--data-dir`` flag wins over ``FALIGN_DATA_DIR``."""
    value = flag or os.environ.get(DATA_DIR_ENV)
    if not value:
        raise DataUnavailableError(
            f"No MNIST directory given. Pass --data-dir, set {DATA_DIR_ENV}, or use --dataset synthetic-xor."
        )
    return Path(value)


def _find(data_dir: Path, name: str) -> Path:
    for candidate in (data_dir / name, data_dir / f"{name}.gz"):
        if candidate.is_file():
            return candidate
    raise DataUnavailableError(
        f"Missing MNIST file '{name}' in {data_dir}. Pass --data-dir, set {DATA_DIR_ENV}, or use --dataset synthetic-xor."
    )


def load_mnist(data_dir: Optional[str | Path] = None) -> tuple[Dataset, Dataset]:
    """Train and test splits from the four standard MNIST files."""
    root = resolve_data_dir(data_dir)
    paths = {key: _find(root, name) for key, name in MNIST_FILES.items()}
    train = Dataset(load_idx(paths["train_images"]), load_idx(paths["train_labels"]))
    test = Dataset(load_idx(paths["test_images"]), load_idx(paths["test_labels"]))
    logger.info(f"Loaded MNIST from {root}: {len(train)} train, {len(test)} test examples")
    return train, test


def synthetic_xor(
    n_per_class: int,
    rng: Rng,
    n_features: int = 784,
    noise: float = 0.05,
    distractors: int = 0,
    distractor_scale: float = 0.12,
) -> Dataset:
    """Two-class XOR on the corners of the unit square.

    Feature 0 and 1 carry the point, feature 2 is a constant 1.0 (the network
    has no biases, so it needs a constant input to separate the classes).
    The next ``distractors`` features hold zero-mean Gaussian noise with
    standard deviation ``distractor_scale`` and the rest stay zero. Class 0
    sits on (0,0)/(1,1), class 1 on (0,1)/(1,0).

    Distractors outnumber what a fixed random hidden layer can filter out, so
    only a network that trains its lower layers separates the classes.
    """
    if n_per_class < 1:
        raise ValueError(f"need at least one example per class, got {n_per_class}")
    if distractors < 0 or distractor_scale < 0:
        raise ValueError("distractor count and scale must be non-negative")
    if n_features < 3 + distractors:
        raise ValueError(f"synthetic XOR with {distractors} distractors needs at least {3 + distractors} features, got {n_features}")
    g = rng.generator
    n = 2 * n_per_class
    labels = np.repeat(np.arange(2, dtype=np.int64), n_per_class)
    first = g.integers(0, 2, size=n)
    second = first ^ labels
    corners = np.stack([first, second]).astype(np.float64)
    points = np.clip(0.1 + 0.8 * corners + g.normal(0.0, noise, size=(2, n)), 0.0, 1.0)
    images = np.zeros((n_features, n), dtype=np.float64)
    images[:2] = points
    images[2] = 1.0
    if distractors:
        images[3:3 + distractors] = g.normal(0.0, distractor_scale, size=(distractors, n))
    return Dataset(images, labels, n_classes=2)
