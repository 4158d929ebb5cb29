"""Shared fixtures: every test starts in 64-bit precision on a clean tape."""

import numpy as np
import pytest

from emnet.precision import set_precision
from emnet.tensor import clear_tape


@pytest.fixture(autouse=True)
def _clean_state():
    set_precision(64)
    clear_tape()
    yield
    set_precision(64)
    clear_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def central_diff(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Dense central-difference gradient of scalar f wrt array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        f1 = f(x)
        flat[i] = keep - eps
        f2 = f(x)
        flat[i] = keep
        gflat[i] = (f1 - f2) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1.0)
    return float(np.abs(a - b).max(initial=0.0) / denom)
