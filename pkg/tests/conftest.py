import hypothesis
import numpy as np
import pytest

from modules.corrosion_model import DEFAULT_PARAMS, CorrosionModel
from tests.toy_models import DriftModel, make_chain

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=20, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=200, deadline=None)
hypothesis.settings.load_profile("fast")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def corrosion_model():
    return CorrosionModel(DEFAULT_PARAMS)


@pytest.fixture
def drift_model():
    return DriftModel(rate=0.5, wall=10.0)


@pytest.fixture
def two_stage_chain():
    """N = 1 drift chain: one start point, two next points with S = 1 and S = 4."""
    return make_chain(
        grids=[
            ([[1.0, 2.0, 0.0]], [1.0]),
            ([[1.0, 3.0, 1.0], [1.0, 6.0, 4.0]], [0.5, 0.5]),
        ],
        transitions=[[[0.5, 0.5]]],
    )
