import numpy as np
import pytest

from cardseg import tensor as T


@pytest.fixture(autouse=True)
def finite_checks():
    """Assert no NaN/Inf escapes any forward op during unit tests."""
    T.set_debug_checks(True)
    yield
    T.set_debug_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
