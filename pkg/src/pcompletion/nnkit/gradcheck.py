"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Tuple

import numpy as np


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / denom


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5,
                     indices: Optional[Iterable[int]] = None) -> np.ndarray:
    """Central differences of a scalar function; NaN where a coordinate was not probed."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.full(flat.shape, np.nan)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value while probing coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(x.shape)


def grad_check(f: Callable[[np.ndarray], Tuple[float, np.ndarray]], x: np.ndarray,
               step: float = 1e-5, indices: Optional[Iterable[int]] = None) -> float:
    """Max relative error between ``f``'s analytic gradient and central differences.

    ``f(x)`` must return ``(value, gradient)``.  Relative error per coordinate is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    x = np.array(x, dtype=np.float64)
    value, analytic = f(x)
    if not np.isfinite(value) or not np.all(np.isfinite(analytic)):
        raise FloatingPointError("non-finite value or gradient at the probe point")
    numeric = numeric_gradient(lambda z: f(z)[0], x, step, indices)
    probed = ~np.isnan(numeric)
    if not probed.any():
        return 0.0
    return float(relative_error(np.asarray(analytic)[probed], numeric[probed]).max())
