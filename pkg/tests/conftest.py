import numpy as np
import pytest

from kernelicl import ModelConfig, init_parameters
from kernelicl.priorgen import Dataset


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(width=8, heads=2, col_layers=1, row_layers=1, icl_layers=1,
                       inducing=2, d_k=4, classes=2)


@pytest.fixture(scope="session")
def tiny_params(tiny_config):
    return init_parameters(tiny_config, seed=1)


@pytest.fixture()
def small_dataset():
    rng = np.random.default_rng(3)
    return Dataset(rng.standard_normal((4, 3)), np.array([0, 1, 0, 1]),
                   rng.standard_normal((2, 3)), np.array([1, 0]), "fixture")


def random_instance(rng, n=None, m=None, d_k=None):
    """Random keys/queries/labels for kernel-level tests."""
    n = n or int(rng.integers(2, 65))
    m = m or int(rng.integers(1, 9))
    d_k = d_k or int(rng.integers(1, 17))
    keys = rng.standard_normal((n, d_k))
    queries = rng.standard_normal((m, d_k))
    labels = rng.integers(0, 2, size=n)
    if len(np.unique(labels)) < 2:
        labels[0], labels[1] = 0, 1
    return queries, keys, labels
