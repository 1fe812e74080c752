import numpy as np
import pytest

from config import TestingConfig
from ensembles import build_measurement
from ep_engine import EngineOptions, make_instance, run_ep
from models import EnsembleSpec
from priors import BernoulliGaussianPrior, QpskPrior
from rng import SeededRNG


@pytest.fixture
def runtime():
    return TestingConfig


@pytest.fixture
def rng():
    return SeededRNG(12345)


@pytest.fixture
def bg_prior():
    return BernoulliGaussianPrior(0.1)


@pytest.fixture
def qpsk_prior():
    return QpskPrior()


@pytest.fixture
def complex_matrix():
    """Factory for seeded complex Gaussian matrices."""
    def make(rows, cols, seed=0):
        g = np.random.default_rng(seed)
        return g.standard_normal((rows, cols)) + 1j * g.standard_normal((rows, cols))
    return make


@pytest.fixture
def live_run(bg_prior):
    """A short recorded run at N=64 on the row-orthogonal ensemble."""
    stream = SeededRNG(7)
    model = build_measurement(EnsembleSpec('row-orthogonal-haar'), 32, 64, stream.child(0))
    instance = make_instance(model, bg_prior, 0.01, stream.child(1))
    record = run_ep(instance, bg_prior, 5, EngineOptions(keep_history=True))
    return instance, record
