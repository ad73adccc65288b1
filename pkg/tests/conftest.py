import numpy as np
import pytest

from semcl import numcore


def finite_diff(fn, params, h=1e-5):
    """Central finite differences of a scalar function of a parameter list."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            up = fn()
            p[idx] = old - h
            down = fn()
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


@pytest.fixture
def small_model():
    return numcore.EncoderModel.init((3, 5, 4), seed=0)
