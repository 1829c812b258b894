"""Dense float64 matrix helpers and the seeded random source.

A ``Matrix`` is a 2-D ``numpy`` array of ``float64``. Every helper here
checks shapes up front and returns a new array; nothing is modified in place.
"""
import hashlib
import logging
from typing import Any

import numpy as np
import numpy.typing as npt

Matrix = npt.NDArray[np.float64]

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Raised when matrix shapes do not fit the requested operation."""


class NumericError(ArithmeticError):
    """Raised when a computation leaves the finite float range."""


def as_matrix(data: Any) -> Matrix:
    """Coerce nested sequences or arrays into a 2-D float64 matrix."""
    a = np.array(data, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def check_finite(a: Matrix, what: str = "matrix") -> Matrix:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite entries in {what}")
    return a


def _same_shape(a: Matrix, b: Matrix, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(a: Matrix) -> Matrix:
    return np.ascontiguousarray(a.T)


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    _same_shape(a, b, "hadamard")
    return a * b


def axpy(alpha: float, x: Matrix, y: Matrix) -> Matrix:
    """Return ``alpha * x + y``."""
    _same_shape(x, y, "axpy")
    return alpha * x + y


def inf_norm(a: Matrix) -> float:
    """Largest absolute entry; 0.0 for an empty or all-zero matrix."""
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a)))


def derive_seed(seed: int, *labels: Any) -> int:
    """Derive a 64-bit seed for a named stream from the run seed.

    The derivation is a BLAKE2b hash of the seed and the labels, so adding a
    new stream never shifts the draws of an existing one.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "big")


class Rng:
    """Single-owner random stream: numpy's PCG64 seeded with a 64-bit seed.

    Equal seeds give bit-identical sample sequences for the same numpy build.
    Do not share one instance between logical streams; use ``derive``.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, *labels: Any) -> "Rng":
        return Rng(derive_seed(self.seed, *labels))

    def permutation(self, n: int) -> npt.NDArray[np.int64]:
        return self.generator.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed})"


def _check_dims(rows: int, cols: int) -> None:
    if rows < 1 or cols < 1:
        raise ShapeError(f"dimensions must be positive, got {rows}x{cols}")


def sample_normal(rng: Rng, rows: int, cols: int) -> Matrix:
    _check_dims(rows, cols)
    return rng.generator.standard_normal((rows, cols))


def sample_rademacher(rng: Rng, rows: int, cols: int) -> Matrix:
    """Entries drawn uniformly from {-1, +1}."""
    _check_dims(rows, cols)
    bits = rng.generator.integers(0, 2, size=(rows, cols))
    return (2 * bits - 1).astype(np.float64)
