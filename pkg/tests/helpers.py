"""Independent reference computations shared by the tests."""
import numpy as np


def riemann_level2(values: np.ndarray, fine: int = 64) -> np.ndarray:
    """``int_0^1 (x_u - x_0) (x) dx_u`` for a polygon by midpoint sums on each segment.

    The integrand is linear on each segment, so the midpoint rule is exact;
    this is a summation entirely separate from prefix products.
    """
    values = np.asarray(values, dtype=float)
    d = values.shape[1]
    total = np.zeros((d, d))
    for a, b in zip(values[:-1], values[1:]):
        step = (b - a) / fine
        for k in range(fine):
            mid = a + (k + 0.5) * step - values[0]
            total += np.outer(mid, step)
    return total


def random_polygon(rng, n_steps: int, d: int) -> np.ndarray:
    return np.vstack([np.zeros((1, d)), np.cumsum(rng.standard_normal((n_steps, d)), axis=0)])
