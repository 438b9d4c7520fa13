import numpy as np
import pytest

from lgssm_bench.ssm import ModelParams


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def random_walk():
    """The scalar random walk observed in noise used throughout the experiments."""
    return ModelParams.scalar(F=1.0, H=1.0, Q=1e-5, R=1e-3, mu0=0.0, Sigma0=1e-4)
