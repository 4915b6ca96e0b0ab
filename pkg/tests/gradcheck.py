"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

H = 1e-5
RTOL = 1e-4


def numeric_grad(loss_fn, arr, h=H, pattern_fn=None):
    """d loss / d arr by central differences, perturbing ``arr`` in place.

    ``pattern_fn`` (called right after ``loss_fn``) returns the activation
    pattern of the piecewise-linear units. When one side of the stencil
    flips a unit, that side is not on the same linear piece and the one-sided
    difference from the other side is used instead.
    """
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    if pattern_fn is not None:
        base = loss_fn()
        base_pattern = pattern_fn()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn()
        up_same = pattern_fn is None or np.array_equal(pattern_fn(), base_pattern)
        flat[i] = old - h
        down = loss_fn()
        down_same = pattern_fn is None or np.array_equal(pattern_fn(), base_pattern)
        flat[i] = old
        if up_same == down_same:
            g[i] = (up - down) / (2 * h)
        elif up_same:
            g[i] = (up - base) / h
        else:
            g[i] = (base - down) / h
    return grad


def rel_error(analytic, numeric):
    """Tensor-wise ``||a - n|| / max(||a||, ||n||)``; 0 when both vanish."""
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return 0.0 if den < 1e-12 else float(num / den)
