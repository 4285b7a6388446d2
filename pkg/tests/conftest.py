import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from fnt import tensor as tt


@pytest.fixture
def f64():
    """Run a test in the 64-bit verification mode."""
    with tt.dtype_scope("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def normalize_log(x, axis=-1):
    """Turn raw scores into log-probabilities along an axis."""
    return x - np.log(np.exp(x).sum(axis=axis, keepdims=True))


@pytest.fixture
def norm():
    return normalize_log
