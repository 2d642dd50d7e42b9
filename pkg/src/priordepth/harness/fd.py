"""Central finite differences."""
from __future__ import annotations

import math

import numpy as np


class NonFiniteEvaluation(FloatingPointError):
    def __init__(self, index, value):
        super().__init__(f"loss is non-finite ({value}) when perturbing coordinate {index}")
        self.index = index


def fd_gradient(loss_fn, x, eps=1e-3):
    """``(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`` for every coordinate of ``x``."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(loss_fn(x))
        flat[i] = orig - eps
        fm = float(loss_fn(x))
        flat[i] = orig
        for v in (fp, fm):
            if not math.isfinite(v):
                raise NonFiniteEvaluation(tuple(int(j) for j in np.unravel_index(i, x.shape)), v)
        grad.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
    return grad


def richardson_ratio(loss_fn, x, eps=0.05):
    """``|G(eps) - G(eps/2)| / |G(eps/2) - G(eps/4)|``; about 4 for a second-order scheme."""
    g1 = fd_gradient(loss_fn, x, eps)
    g2 = fd_gradient(loss_fn, x, eps / 2)
    g4 = fd_gradient(loss_fn, x, eps / 4)
    num = np.linalg.norm(g1 - g2)
    den = np.linalg.norm(g2 - g4)
    if den == 0:
        raise ZeroDivisionError("gradient estimates agree exactly; ratio undefined")
    return float(num / den)
