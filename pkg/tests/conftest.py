import numpy as np
import pytest

from localvit.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


def rel_err(a, b, floor=1e-5):
    # floor: blocks with (near-)zero true gradient, e.g. attention key bias
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def param(arr):
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)
