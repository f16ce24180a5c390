import numpy as np
import pytest

from lstmlab.numerics import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


def central_diff(f, x, eps=1e-6):
    """Plain float64 central difference, independent of the package's checker."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e.flat[j] = eps
        g.flat[j] = (f(x + e) - f(x - e)) / (2 * eps)
    return g
