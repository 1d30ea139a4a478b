"""Central finite-difference gradient checking.

Used by the test suite and the CLI selfcheck. Checks should run in
float64; float32 rounding swamps the h=1e-5 stencil.
"""
from __future__ import annotations

import numpy as np

__all__ = ["finite_difference", "max_relative_error"]


def finite_difference(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar-valued `fn` at `x`."""
    x = np.array(x, dtype=np.float64)  # private copy; callers may pass frozen arrays
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all coordinates."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
