import numpy as np
import pytest

from bolt.pipeline import build_library


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def libraries():
    """Default synthetic libraries (8 sources each) for family seeds 0..4."""
    return [build_library(seed) for seed in range(5)]


@pytest.fixture(scope="session")
def library(libraries):
    return libraries[0]
