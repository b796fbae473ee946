import numpy as np
import pytest


def fd_grad(f, x, step=1e-5):
    """Central-difference gradient of scalar f at flat array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * step)
    return g


def fd_jacobian(f, x, step=1e-5):
    """Central-difference Jacobian of vector f at flat array x: (m, n)."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    cols = []
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = np.asarray(f(x), dtype=np.float64).reshape(-1)
        flat[i] = orig - step
        fm = np.asarray(f(x), dtype=np.float64).reshape(-1)
        flat[i] = orig
        cols.append((fp - fm) / (2 * step))
    return np.stack(cols, axis=1)


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
