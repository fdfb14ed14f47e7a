import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from r2rproto.gradcheck import numeric_grad, relative_error  # noqa: E402
from r2rproto.tensor import Tensor, backward  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param(arr):
    return Tensor(np.array(arr, dtype=float), requires_grad=True)


def check_grads(loss_fn, params, tol=1e-4):
    """Analytic vs central-difference gradients; returns the worst relative error."""
    for p in params:
        p.grad = None
    backward(loss_fn())
    worst = 0.0
    for p in params:
        num = numeric_grad(lambda: float(loss_fn().data), p)
        worst = max(worst, relative_error(p.grad, num))
    assert worst <= tol, worst
    return worst
