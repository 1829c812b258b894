import os

import pytest

from falign.data import DATA_DIR_ENV, one_hot
from falign.experiments import DatasetName, ExperimentConfig
from falign.network import Architecture, forward, init_weights
from falign.numerics import Rng
from falign.rules import RuleTag


def pytest_collection_modifyitems(config, items):
    if os.environ.get(DATA_DIR_ENV):
        return
    skip = pytest.mark.skip(reason=f"{DATA_DIR_ENV} is not set")
    for item in items:
        if "mnist" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def arch():
    return Architecture((5, 4, 3, 2))


@pytest.fixture
def make_case(arch):
    """Random network, forward trace and targets for a seed."""

    def make(seed, scale=0.5, batch_size=3, architecture=None):
        a = architecture or arch
        rng = Rng(seed)
        net = init_weights(a, rng.derive("init"), scale)
        inputs = rng.derive("inputs").generator.standard_normal((a.input_dim, batch_size))
        labels = rng.derive("labels").generator.integers(0, a.n_classes, size=batch_size)
        targets = one_hot(labels, a.n_classes)
        return net, forward(net, inputs), targets

    return make


@pytest.fixture
def tiny_config():
    return ExperimentConfig(
        arch=(6, 5, 4, 2),
        rule=RuleTag.FA,
        batch_size=10,
        epochs=2,
        cadence=2,
        weight_scale=0.5,
        dataset=DatasetName.SYNTHETIC_XOR,
        synthetic_per_class=20,
        seed=3,
    )


@pytest.fixture
def no_data_dir(monkeypatch):
    monkeypatch.delenv(DATA_DIR_ENV, raising=False)
