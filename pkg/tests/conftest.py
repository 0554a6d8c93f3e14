import numpy as np
import pytest

from odemri.tensor_core import ComplexImage


def random_image(rng, h, w=None):
    w = h if w is None else w
    return ComplexImage(rng.standard_normal((h, w)), rng.standard_normal((h, w)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(fn, x, eps=1e-5):
    """Central differences of scalar ``fn`` w.r.t. every entry of array ``x`` (in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = fn()
        flat[i] = old - eps
        fm = fn()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def max_rel_err(a, b, floor=1e-2):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
