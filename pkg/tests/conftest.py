import numpy as np
import pytest


def finite_difference_grad(loss_fn, params, coords, h=1e-5):
    """Central-difference gradient of loss_fn at the given coordinates."""
    out = np.zeros(len(coords))
    for n, i in enumerate(coords):
        p = params.copy()
        p[i] += h
        up = loss_fn(p)
        p[i] -= 2 * h
        down = loss_fn(p)
        out[n] = (up - down) / (2 * h)
    return out


def max_rel_error(a, b, floor=1e-8):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
