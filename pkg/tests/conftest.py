import numpy as np
import pytest

from octdiff.diffusion import make_linear_schedule


@pytest.fixture(scope="session")
def default_sched():
    """The production schedule: 100 steps, betas linear 1e-4 -> 6e-3."""
    return make_linear_schedule(100, 1e-4, 6e-3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
