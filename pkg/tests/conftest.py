import os

# cap math-library threads before numpy loads: keeps runs bitwise reproducible
# and makes process CPU time equal one core's budget
os.environ.setdefault("CISL_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
