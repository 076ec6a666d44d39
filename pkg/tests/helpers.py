"""Shared test utilities, chiefly the central finite-difference oracle.

The oracle only ever calls forward functions; it never touches any backward
code path, so gradient checks compare two independent computations.
"""

import numpy as np


def finite_difference_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar-valued f at x, elementwise."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / denom)


def random_weighted_sum(rng, shape):
    """A fixed random weighting used to reduce an op output to a scalar."""
    return rng.standard_normal(shape)
