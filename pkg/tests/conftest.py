import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile(
    "volsurf", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("volsurf")

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240105)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(7)
