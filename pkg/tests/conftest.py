import numpy as np
import pytest


def fdgrad(f, arrays, eps=1e-6):
    """Central finite differences of a scalar function of numpy arrays.

    ``f`` takes no arguments and must recompute from the (mutated) arrays,
    so it stays independent of any gradient tape it is checking.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            f_plus = f()
            flat[i] = old - eps
            f_minus = f()
            flat[i] = old
            gf[i] = (f_plus - f_minus) / (2 * eps)
        grads.append(g)
    return grads


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
