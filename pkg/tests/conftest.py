import os

import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)
os.environ.pop("SAMOE_LAB_SEED", None)

settings.register_profile("lab", max_examples=40, deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lab")


@pytest.fixture
def rng():
    from samoe_lab.numerics import Rng
    return Rng(1234, 0)
