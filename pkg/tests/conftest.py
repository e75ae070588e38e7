from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from defa.model import synth_model

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_model():
    return synth_model(7, 12, 3, 2)


@pytest.fixture(scope="session")
def small_model():
    return synth_model(1, 162, 4, 2)


@pytest.fixture(scope="session")
def face_model():
    """Smallest model carrying the 68/21-point markups at a usable density."""
    return synth_model(0, 642, 6, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
