import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repro", derandomize=True, max_examples=60)
settings.load_profile("repro")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
