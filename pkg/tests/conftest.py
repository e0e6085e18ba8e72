import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from levyspde.field import TorusGrid

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def grid1():
    return TorusGrid(1, 2 * math.pi, 32)


@pytest.fixture
def grid2():
    return TorusGrid(2, 2 * math.pi, 16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
