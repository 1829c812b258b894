"""Bias-free tanh multi-layer perceptron with a softmax output layer.

Batches are stored one example per column, so a layer is ``h = W @ f`` and
a weight update is a single ``delta @ f.T``.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np
import numpy.typing as npt

from .numerics import (
    Matrix,
    NumericError,
    Rng,
    ShapeError,
    as_matrix,
    matmul,
    sample_normal,
)

if TYPE_CHECKING:
    from .rules import FeedbackSet

logger = logging.getLogger(__name__)

# Probe logits for the large-weight softmax check.
SOFTMAX_PROBE = (1.0, 2.0, 3.0)


class Activation(str, Enum):
    TANH = "tanh"


class WeightMode(str, Enum):
    NORMAL_SCALED = "normal"
    SIGN_MATCHED = "sign-matched"
    EQUAL_TO_FEEDBACK = "equal-feedback"


@dataclass(frozen=True)
class Architecture:
    layer_sizes: tuple[int, ...]
    hidden_activation: Activation = Activation.TANH

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError(f"an architecture needs at least 2 layer sizes, got {sizes}")
        if any(n < 1 for n in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")

    @property
    def depth(self) -> int:
        """Number of weight layers, L."""
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    def weight_shapes(self) -> list[tuple[int, int]]:
        """Shape n_l x n_(l-1) of each weight matrix, input layer first."""
        s = self.layer_sizes
        return [(s[i + 1], s[i]) for i in range(self.depth)]


@dataclass(frozen=True)
class Network:
    """Weights of layers 1..L; ``weights[i]`` belongs to layer ``i + 1``."""

    arch: Architecture
    weights: tuple[Matrix, ...]

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(self.weights))
        expected = self.arch.weight_shapes()
        got = [w.shape for w in self.weights]
        if got != expected:
            raise ShapeError(f"weight shapes {got} do not chain for architecture {expected}")

    @property
    def depth(self) -> int:
        return self.arch.depth

    def copy(self) -> "Network":
        return Network(self.arch, tuple(w.copy() for w in self.weights))

    def weight_norms(self) -> tuple[float, ...]:
        return tuple(float(np.linalg.norm(w)) for w in self.weights)


@dataclass(frozen=True)
class ForwardTrace:
    input: Matrix
    preactivations: tuple[Matrix, ...]
    activations: tuple[Matrix, ...]

    @property
    def probs(self) -> Matrix:
        """Softmax output of the last layer."""
        return self.activations[-1]

    @property
    def batch_size(self) -> int:
        return self.input.shape[1]

    def layer_input(self, i: int) -> Matrix:
        """Activation feeding weight layer ``i`` (0-based): f^(i)."""
        return self.input if i == 0 else self.activations[i - 1]


def init_weights(
    arch: Architecture,
    rng: Rng,
    scale: float,
    mode: WeightMode = WeightMode.NORMAL_SCALED,
    feedback: Optional["FeedbackSet"] = None,
) -> Network:
    """Draw initial weights.

    Every layer gets a standard-normal draw first, so the three modes see the
    same magnitudes. ``SIGN_MATCHED`` keeps the magnitudes but copies the
    sign of the feedback matrix; ``EQUAL_TO_FEEDBACK`` uses the feedback
    matrix itself. The input layer has no feedback-alignment matrix and keeps
    its normal draw in every mode.
    """
    if scale < 0:
        raise ValueError(f"weight scale must be non-negative, got {scale}")
    mode = WeightMode(mode)
    draws = [sample_normal(rng, rows, cols) for rows, cols in arch.weight_shapes()]

    if mode is WeightMode.NORMAL_SCALED:
        return Network(arch, tuple(scale * d for d in draws))

    if feedback is None:
        raise ValueError(f"weight mode '{mode.value}' needs a feedback set")
    if feedback.kind.value != "fa":
        raise ShapeError(f"weight mode '{mode.value}' needs feedback-alignment matrices, got {feedback.kind.value}")
    feedback.validate(arch)

    weights = []
    for i, draw in enumerate(draws):
        r = feedback.matrices[i]
        if r is None:
            weights.append(scale * draw)
        elif mode is WeightMode.SIGN_MATCHED:
            weights.append(np.abs(draw) * scale * np.sign(r))
        else:
            weights.append(r * scale)
    return Network(arch, tuple(weights))


def softmax(logits: Matrix) -> Matrix:
    """Column-wise softmax, max-shifted so large logits cannot overflow."""
    shifted = logits - np.max(logits, axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=0, keepdims=True)


def tanh_prime_from_output(f: Matrix) -> Matrix:
    """tanh'(h) written in terms of f = tanh(h)."""
    return 1.0 - f * f


def forward(net: Network, batch: Matrix) -> ForwardTrace:
    if batch.ndim != 2 or batch.shape[0] != net.arch.input_dim:
        raise ShapeError(f"input of shape {batch.shape} does not fit input dimension {net.arch.input_dim}")
    pre: list[Matrix] = []
    act: list[Matrix] = []
    f = batch
    last = net.depth - 1
    for i, w in enumerate(net.weights):
        h = matmul(w, f)
        f = softmax(h) if i == last else np.tanh(h)
        pre.append(h)
        act.append(f)
    return ForwardTrace(batch, tuple(pre), tuple(act))


def _check_onehot(what: str, outputs: Matrix, onehot: Matrix) -> None:
    if outputs.shape != onehot.shape:
        raise ShapeError(f"{what}: shape mismatch {outputs.shape} vs {onehot.shape}")
    if not (np.all((onehot == 0.0) | (onehot == 1.0)) and np.all(onehot.sum(axis=0) == 1.0)):
        raise ValueError("every one-hot column must contain exactly one 1")


def cross_entropy(probs: Matrix, onehot: Matrix) -> float:
    """Mean over the batch of -log p(true class)."""
    _check_onehot("cross_entropy", probs, onehot)
    true_p = np.sum(probs * onehot, axis=0)
    if np.any(true_p <= 0.0):
        raise NumericError("cross_entropy: probability of a true class is not positive")
    return float(np.mean(-np.log(true_p)))


def cross_entropy_from_logits(logits: Matrix, onehot: Matrix) -> float:
    """Same loss as ``cross_entropy`` computed as logsumexp(h) - h_true.

    Stays finite when the softmax probability of the true class underflows.
    """
    _check_onehot("cross_entropy_from_logits", logits, onehot)
    if not np.all(np.isfinite(logits)):
        raise NumericError("cross_entropy_from_logits: non-finite logits")
    top = np.max(logits, axis=0)
    log_norm = top + np.log(np.sum(np.exp(logits - top), axis=0))
    true_h = np.sum(logits * onehot, axis=0)
    return float(np.mean(log_norm - true_h))


def accuracy(probs: Matrix, labels: Sequence[int] | npt.NDArray[np.integer]) -> float:
    """Fraction of columns whose argmax equals the label.

    Ties go to the lowest class index (``np.argmax`` returns the first maximum).
    """
    labels = np.asarray(labels)
    if labels.shape != (probs.shape[1],):
        raise ShapeError(f"accuracy: {labels.shape[0]} labels for {probs.shape[1]} columns")
    return float(np.mean(np.argmax(probs, axis=0) == labels))


def evaluate_accuracy(net: Network, images: Matrix, labels: npt.NDArray[np.integer], chunk: int = 2000) -> float:
    """Accuracy over a whole dataset, evaluated in column chunks."""
    n = images.shape[1]
    correct = 0
    for start in range(0, n, chunk):
        probs = forward(net, images[:, start:start + chunk]).probs
        correct += int(np.sum(np.argmax(probs, axis=0) == labels[start:start + chunk]))
    return correct / n


def softmax_jacobian(logits: Sequence[float]) -> Matrix:
    """d sigma_i / d x_j = p_i (delta_ij - p_j)."""
    p = softmax(as_matrix(logits).reshape(-1, 1)).ravel()
    return np.diag(p) - np.outer(p, p)


def softmax_jacobian_diag_decay_check(logit_scale: float, probe: Sequence[float] = SOFTMAX_PROBE) -> float:
    """Largest |d sigma_i / d x_j| at ``logit_scale * probe``.

    Shrinks towards zero as the logits grow apart, which is why updates
    vanish once weights become large.
    """
    if logit_scale < 0:
        raise ValueError(f"logit scale must be non-negative, got {logit_scale}")
    j = softmax_jacobian([logit_scale * x for x in probe])
    return float(np.max(np.abs(j)))
