"""Central finite-difference checks of reverse-mode gradients."""
from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """d fn() / d x by central differences, perturbing ``x.value`` in place."""
    g = np.zeros_like(x.value, dtype=np.float64)
    flat = x.value.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = float(fn().value)
        flat[i] = old - step
        lo = float(fn().value)
        flat[i] = old
        g.reshape(-1)[i] = (hi - lo) / (2 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute deviation relative to the largest gradient entry."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Worst relative error over all ``inputs`` of a scalar-valued ``fn``."""
    for x in inputs:
        x.grad = None
    fn().backward()
    worst = 0.0
    for x in inputs:
        analytic = np.zeros_like(x.value) if x.grad is None else x.grad
        worst = max(worst, relative_error(analytic, numeric_grad(fn, x, step)))
    return worst
