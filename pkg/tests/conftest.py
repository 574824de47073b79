import numpy as np
import pytest
from hypothesis import settings

from protoworld.model import init_params

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_params():
    return init_params(6, 3, 4, hidden_sizes=(5, 5), seed=3)
