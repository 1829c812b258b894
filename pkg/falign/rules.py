"""Weight-update rules: backprop, feedback alignment, direct feedback
alignment, angle-perturbed backprop and last-layer-only training.

Every rule maps ``(net, trace, onehot)`` to a ``GradientSet`` shaped like
the network's weights. ``apply_update`` takes a descent step along it.
"""
import hashlib
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .network import Architecture, ForwardTrace, Network, tanh_prime_from_output
from .numerics import (
    Matrix,
    NumericError,
    Rng,
    ShapeError,
    matmul,
    sample_normal,
    sample_rademacher,
    transpose,
)

logger = logging.getLogger(__name__)

# Feedback matrices up to this size are checked for full rank on sampling.
RANK_CHECK_MAX_DIM = 64
RANK_RESAMPLE_ATTEMPTS = 100


class FeedbackKind(str, Enum):
    FA = "fa"
    DFA = "dfa"


class FeedbackDistribution(str, Enum):
    RADEMACHER = "rademacher"
    NORMAL = "normal"


class RuleTag(str, Enum):
    BP = "bp"
    FA = "fa"
    DFA = "dfa"
    PERTURBED = "perturbed"
    LAST_LAYER = "lastlayer"


@dataclass(frozen=True)
class FeedbackSet:
    """Fixed random feedback matrices, aligned index-for-index with the weights.

    FA: ``matrices[i]`` has the shape of ``weights[i]`` for i >= 1 and
    ``matrices[0]`` is None (the input layer never sends an error backwards).
    DFA: ``matrices[i]`` is n_L x n_(i+1) for i < L-1 and the output entry is
    None. Matrices are frozen read-only on construction.
    """

    kind: FeedbackKind
    matrices: tuple[Optional[Matrix], ...]

    def __post_init__(self):
        frozen = []
        for m in self.matrices:
            if m is not None:
                m = np.array(m, dtype=np.float64)
                m.flags.writeable = False
            frozen.append(m)
        object.__setattr__(self, "kind", FeedbackKind(self.kind))
        object.__setattr__(self, "matrices", tuple(frozen))

    @staticmethod
    def expected_shapes(kind: FeedbackKind, arch: Architecture) -> list[Optional[tuple[int, int]]]:
        s = arch.layer_sizes
        depth = arch.depth
        if FeedbackKind(kind) is FeedbackKind.FA:
            return [None] + [(s[i + 1], s[i]) for i in range(1, depth)]
        return [(s[-1], s[i + 1]) for i in range(depth - 1)] + [None]

    def validate(self, arch: Architecture) -> None:
        expected = self.expected_shapes(self.kind, arch)
        got = [None if m is None else m.shape for m in self.matrices]
        if got != expected:
            raise ShapeError(f"{self.kind.value} feedback shapes {got} do not fit architecture, expected {expected}")

    @classmethod
    def sample(
        cls,
        kind: FeedbackKind,
        arch: Architecture,
        rng: Rng,
        distribution: FeedbackDistribution = FeedbackDistribution.RADEMACHER,
    ) -> "FeedbackSet":
        kind = FeedbackKind(kind)
        distribution = FeedbackDistribution(distribution)
        sampler = sample_rademacher if distribution is FeedbackDistribution.RADEMACHER else sample_normal
        matrices = []
        for layer, shape in enumerate(cls.expected_shapes(kind, arch), start=1):
            if shape is None:
                matrices.append(None)
                continue
            m = sampler(rng, *shape)
            if max(shape) <= RANK_CHECK_MAX_DIM:
                attempts = 1
                while np.linalg.matrix_rank(m) < min(shape):
                    if attempts >= RANK_RESAMPLE_ATTEMPTS:
                        raise NumericError(f"could not draw a full-rank feedback matrix for layer {layer}")
                    logger.warning(f"Resampling rank-deficient {kind.value} feedback matrix for layer {layer}")
                    m = sampler(rng, *shape)
                    attempts += 1
            matrices.append(m)
        return cls(kind, tuple(matrices))

    @classmethod
    def from_weights(cls, net: Network) -> "FeedbackSet":
        """FA feedback equal to the current forward weights; FA then reduces to BP."""
        return cls(FeedbackKind.FA, (None,) + tuple(w.copy() for w in net.weights[1:]))

    def checksum(self) -> str:
        h = hashlib.sha256(self.kind.value.encode())
        for m in self.matrices:
            h.update(b"-" if m is None else np.ascontiguousarray(m).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class GradientSet:
    deltas: tuple[Matrix, ...]
    rule_tag: RuleTag

    def __post_init__(self):
        object.__setattr__(self, "deltas", tuple(self.deltas))

    def is_zero(self) -> bool:
        return all(not np.any(d) for d in self.deltas)


def _check_batch(net: Network, trace: ForwardTrace, onehot: Matrix) -> None:
    if len(trace.activations) != net.depth:
        raise ShapeError(f"trace has {len(trace.activations)} layers, network has {net.depth}")
    for i, (w, h) in enumerate(zip(net.weights, trace.preactivations)):
        if h.shape[0] != w.shape[0]:
            raise ShapeError(f"trace layer {i + 1} has {h.shape[0]} units, weights have {w.shape[0]}")
    if onehot.shape != trace.probs.shape:
        raise ShapeError(f"targets of shape {onehot.shape} do not match output {trace.probs.shape}")


def output_delta(trace: ForwardTrace, onehot: Matrix) -> Matrix:
    """dL/dh^(L) for softmax + mean cross-entropy: (p - y) / batch_size."""
    if onehot.shape != trace.probs.shape:
        raise ShapeError(f"targets of shape {onehot.shape} do not match output {trace.probs.shape}")
    return (trace.probs - onehot) / trace.batch_size


def _propagate(
    net: Network,
    trace: ForwardTrace,
    onehot: Matrix,
    backward: Sequence[Optional[Matrix]],
    tag: RuleTag,
) -> GradientSet:
    """Layer-by-layer error recursion; ``backward[i]`` carries the error of
    layer i+1 down to layer i (0-based) through its transpose."""
    _check_batch(net, trace, onehot)
    depth = net.depth
    grads: list[Matrix] = [None] * depth  # type: ignore[list-item]
    delta = output_delta(trace, onehot)
    grads[-1] = matmul(delta, transpose(trace.layer_input(depth - 1)))
    for i in range(depth - 2, -1, -1):
        delta = matmul(transpose(backward[i + 1]), delta) * tanh_prime_from_output(trace.activations[i])
        grads[i] = matmul(delta, transpose(trace.layer_input(i)))
    return GradientSet(tuple(grads), tag)


def backprop(net: Network, trace: ForwardTrace, onehot: Matrix) -> GradientSet:
    return _propagate(net, trace, onehot, net.weights, RuleTag.BP)


def fa_pseudogradient(net: Network, feedback: FeedbackSet, trace: ForwardTrace, onehot: Matrix) -> GradientSet:
    """Backprop with each W^(l+1) in the backward pass replaced by R^(l+1)."""
    if feedback.kind is not FeedbackKind.FA:
        raise ValueError(f"feedback alignment needs FA feedback, got {feedback.kind.value}")
    feedback.validate(net.arch)
    return _propagate(net, trace, onehot, feedback.matrices, RuleTag.FA)


def dfa_pseudogradient(net: Network, feedback: FeedbackSet, trace: ForwardTrace, onehot: Matrix) -> GradientSet:
    """Project the output error straight to every hidden layer through B^(l)."""
    if feedback.kind is not FeedbackKind.DFA:
        raise ValueError(f"direct feedback alignment needs DFA feedback, got {feedback.kind.value}")
    feedback.validate(net.arch)
    _check_batch(net, trace, onehot)
    depth = net.depth
    error = output_delta(trace, onehot)
    grads = []
    for i in range(depth - 1):
        delta = matmul(transpose(feedback.matrices[i]), error) * tanh_prime_from_output(trace.activations[i])
        grads.append(matmul(delta, transpose(trace.layer_input(i))))
    grads.append(matmul(error, transpose(trace.layer_input(depth - 1))))
    return GradientSet(tuple(grads), RuleTag.DFA)


def perturb_gradient(grad: Matrix, angle: float, rng: Rng) -> Matrix:
    """Rotate ``grad`` by ``angle`` radians in a random direction.

    The result keeps the Frobenius norm and has alignment cos(angle) with
    ``grad``; the orthogonal direction is a Gaussian draw with its component
    along ``grad`` removed. A zero gradient comes back unchanged.
    """
    if not 0.0 <= angle <= math.pi:
        raise ValueError(f"perturbation angle must lie in [0, pi], got {angle}")
    norm = float(np.linalg.norm(grad))
    if norm == 0.0 or angle == 0.0:
        return grad.copy()
    if angle == math.pi:
        return -grad
    unit = grad / norm
    noise = rng.generator.standard_normal(grad.shape)
    for _ in range(2):
        noise = noise - np.sum(noise * unit) * unit
    noise_norm = float(np.linalg.norm(noise))
    if noise_norm == 0.0:
        raise NumericError(f"no direction orthogonal to a gradient of shape {grad.shape}")
    return norm * (math.cos(angle) * unit + math.sin(angle) * (noise / noise_norm))


class UpdateRule:
    """Base class for update rules."""

    tag: RuleTag

    @property
    def feedback(self) -> Optional[FeedbackSet]:
        return None

    def compute(self, net: Network, trace: ForwardTrace, onehot: Matrix) -> GradientSet:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class Backprop(UpdateRule):
    tag = RuleTag.BP

    def compute(self, net, trace, onehot):
        return backprop(net, trace, onehot)


class FeedbackAlignment(UpdateRule):
    tag = RuleTag.FA

    def __init__(self, feedback: FeedbackSet):
        if feedback.kind is not FeedbackKind.FA:
            raise ValueError(f"feedback alignment needs FA feedback, got {feedback.kind.value}")
        self._feedback = feedback

    @property
    def feedback(self):
        return self._feedback

    def compute(self, net, trace, onehot):
        return fa_pseudogradient(net, self._feedback, trace, onehot)


class DirectFeedbackAlignment(UpdateRule):
    tag = RuleTag.DFA

    def __init__(self, feedback: FeedbackSet):
        if feedback.kind is not FeedbackKind.DFA:
            raise ValueError(f"direct feedback alignment needs DFA feedback, got {feedback.kind.value}")
        self._feedback = feedback

    @property
    def feedback(self):
        return self._feedback

    def compute(self, net, trace, onehot):
        return dfa_pseudogradient(net, self._feedback, trace, onehot)


class PerturbedBackprop(UpdateRule):
    """Backprop whose input and hidden layer gradients are rotated by a fixed
    angle. A fresh direction is drawn per layer on every call; the output
    layer stays exact.

    ``angle`` is either one angle for every lower layer or a sequence with
    one angle per lower layer (layers 1..L-1).
    """

    tag = RuleTag.PERTURBED

    def __init__(self, angle: float | Sequence[float], rng: Rng):
        angles = (float(angle),) if np.isscalar(angle) else tuple(float(a) for a in angle)
        for a in angles:
            if not 0.0 <= a <= math.pi:
                raise ValueError(f"perturbation angle must lie in [0, pi], got {a}")
        self.angle = angles[0] if np.isscalar(angle) else angles
        self._angles = angles
        self.rng = rng

    def layer_angles(self, depth: int) -> tuple[float, ...]:
        if len(self._angles) == 1:
            return self._angles * (depth - 1)
        if len(self._angles) != depth - 1:
            raise ShapeError(f"{len(self._angles)} perturbation angles for {depth - 1} lower layers")
        return self._angles

    def compute(self, net, trace, onehot):
        exact = backprop(net, trace, onehot).deltas
        angles = self.layer_angles(net.depth)
        if not any(angles):
            return GradientSet(exact, self.tag)
        perturbed = [perturb_gradient(g, a, self.rng) for g, a in zip(exact[:-1], angles)]
        return GradientSet(tuple(perturbed) + (exact[-1],), self.tag)

    def __repr__(self):
        return f"PerturbedBackprop(angle={self.angle!r}, rng={self.rng!r})"


class LastLayerOnly(UpdateRule):
    """Train the output layer only; lower layers stay a fixed random feature map."""

    tag = RuleTag.LAST_LAYER

    def compute(self, net, trace, onehot):
        _check_batch(net, trace, onehot)
        last = matmul(output_delta(trace, onehot), transpose(trace.layer_input(net.depth - 1)))
        zeros = tuple(np.zeros_like(w) for w in net.weights[:-1])
        return GradientSet(zeros + (last,), self.tag)


def build_rule(
    tag: RuleTag,
    *,
    feedback: Optional[FeedbackSet] = None,
    angle: float | Sequence[float] = 0.0,
    rng: Optional[Rng] = None,
) -> UpdateRule:
    tag = RuleTag(tag)
    if tag is RuleTag.BP:
        return Backprop()
    if tag is RuleTag.LAST_LAYER:
        return LastLayerOnly()
    if tag is RuleTag.PERTURBED:
        if rng is None:
            raise ValueError("the perturbed rule needs its own random stream")
        return PerturbedBackprop(angle, rng)
    if feedback is None:
        raise ValueError(f"rule '{tag.value}' needs a feedback set")
    if tag is RuleTag.FA:
        return FeedbackAlignment(feedback)
    return DirectFeedbackAlignment(feedback)


def compute_update(rule: UpdateRule, net: Network, trace: ForwardTrace, onehot: Matrix) -> GradientSet:
    """Dispatch to the rule's update on one batch."""
    update = rule.compute(net, trace, onehot)
    if len(update.deltas) != net.depth:
        raise ShapeError(f"{rule!r} returned {len(update.deltas)} gradients for depth {net.depth}")
    return update


def apply_update(net: Network, grads: GradientSet, learning_rate: float) -> Network:
    """Descent step: w <- w - learning_rate * grad, returned as a new network."""
    if len(grads.deltas) != net.depth:
        raise ShapeError(f"{len(grads.deltas)} gradients for a network of depth {net.depth}")
    weights = []
    for i, (w, g) in enumerate(zip(net.weights, grads.deltas)):
        if w.shape != g.shape:
            raise ShapeError(f"layer {i + 1}: gradient shape {g.shape} does not match weights {w.shape}")
        new = w - learning_rate * g
        if not np.all(np.isfinite(new)):
            raise NumericError(f"weight update left non-finite values in layer {i + 1}")
        weights.append(new)
    return Network(net.arch, tuple(weights))
