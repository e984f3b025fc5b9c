import numpy as np
import pytest

from cpdg import tensor as T


@pytest.fixture(autouse=True)
def float64_mode():
    """Tests run in 64-bit mode; training code defaults to 32-bit."""
    with T.precision(np.float64):
        yield
