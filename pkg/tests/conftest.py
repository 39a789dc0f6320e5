import os
import sys

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

sys.path.insert(0, os.path.dirname(__file__))

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from unext.tensor import precision  # noqa: E402


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
