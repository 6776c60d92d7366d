import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def uniform(x):
    return np.clip(np.asarray(x, dtype=float), 0.0, 1.0)


def quadratic(x):
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    return 1.0 - (1.0 - x) ** 2
