import numpy as np
import pytest

from lurking.estimator import FitConfig, fit
from lurking.simgen import ToySpec, gen_toy


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy_fit():
    """One seeded fit of the replicated, randomized toy study, shared across modules."""
    dataset, truth = gen_toy(ToySpec(seed=0))
    return fit(dataset, FitConfig(seed=0)), truth
