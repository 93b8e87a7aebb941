import numpy as np
import pytest

from atmseg.taxonomy import builtin_taxonomy


@pytest.fixture(scope="session")
def mrspine():
    return builtin_taxonomy("MRSpineSeg")


@pytest.fixture(scope="session")
def spider():
    return builtin_taxonomy("SPIDER")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
