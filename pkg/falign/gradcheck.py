"""Central finite-difference check of the backprop gradient."""
import logging
from typing import Iterable, Sequence

import numpy as np

from .data import one_hot
from .network import Architecture, Network, cross_entropy, forward, init_weights
from .numerics import Rng
from .rules import backprop

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
# Relative errors are taken against max(|g| + |fd|, floor) so that entries
# close to zero are judged by their absolute error.
RELATIVE_FLOOR = 1e-4


def loss_at(net: Network, inputs, onehot) -> float:
    return cross_entropy(forward(net, inputs).probs, onehot)


def numerical_gradient(net: Network, inputs, onehot, step: float = FD_STEP) -> list[np.ndarray]:
    grads = []
    for i, w in enumerate(net.weights):
        g = np.zeros_like(w)
        for idx in np.ndindex(*w.shape):
            weights = [m.copy() for m in net.weights]
            weights[i][idx] = w[idx] + step
            plus = loss_at(Network(net.arch, tuple(weights)), inputs, onehot)
            weights[i][idx] = w[idx] - step
            minus = loss_at(Network(net.arch, tuple(weights)), inputs, onehot)
            g[idx] = (plus - minus) / (2 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        rel = np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), RELATIVE_FLOOR)
        worst = max(worst, float(np.max(rel)))
    return worst


def finite_difference_check(
    seeds: Iterable[int] = range(5),
    layer_sizes: Sequence[int] = (4, 3, 2),
    batch_size: int = 2,
    scale: float = 1.0,
) -> float:
    """Largest relative error between backprop and central differences over
    every weight of every layer, for a random network per seed."""
    arch = Architecture(tuple(layer_sizes))
    worst = 0.0
    for seed in seeds:
        rng = Rng(seed)
        net = init_weights(arch, rng.derive("init"), scale)
        inputs = rng.derive("inputs").generator.standard_normal((arch.input_dim, batch_size))
        labels = rng.derive("labels").generator.integers(0, arch.n_classes, size=batch_size)
        targets = one_hot(labels, arch.n_classes)
        analytic = backprop(net, forward(net, inputs), targets).deltas
        err = max_relative_error(analytic, numerical_gradient(net, inputs, targets))
        logger.debug(f"gradcheck seed {seed}: max relative error {err:.3e}")
        worst = max(worst, err)
    return worst
