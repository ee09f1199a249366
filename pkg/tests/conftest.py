import os

# single-threaded BLAS before numpy loads: deterministic reductions, no oversubscription
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def rng1():
    return np.random.default_rng(1)
