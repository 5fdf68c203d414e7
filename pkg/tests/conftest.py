import numpy as np
import pytest

from superdiff.schedules import VPLinear
from superdiff.score_models import GmmParams, GmmScoreModel


@pytest.fixture
def vp():
    return VPLinear()


@pytest.fixture
def gaussian(vp):
    """Single isotropic Gaussian, s = 0.5, mean (1, -1)."""
    return GmmScoreModel(GmmParams([1.0], [[1.0, -1.0]], 0.5), vp)


@pytest.fixture
def gmm3(vp):
    return GmmScoreModel(GmmParams([0.2, 0.5, 0.3], [[-2.0, 0.5], [1.5, 1.0], [0.0, -2.0]], [0.3, 0.6, 0.0]), vp)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function over the last axis."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for k in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[k] = h
        out[..., k] = (f(x + e) - f(x - e)) / (2 * h)
    return out


@pytest.fixture(scope="session")
def trained_two_cluster():
    """Default TrainConfig on the two-cluster dataset; returns (weights, seconds, history)."""
    import time

    from superdiff.dsm_training import TrainConfig, train, two_cluster_dataset

    history = []
    start = time.perf_counter()
    weights = train(TrainConfig(two_cluster_dataset()), history)
    return weights, time.perf_counter() - start, history


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
