"""Finite-difference oracles used to validate gradients and Jacobians.

Everything here evaluates functions forward-only, so these routines stay
independent of the reverse-mode implementation they are used to check.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

__all__ = ["numerical_gradient", "numerical_jacobian", "max_relative_error"]


def numerical_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-4
) -> np.ndarray:
    """Central-difference gradient of a scalar-valued function at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + eps
        hi = f(x)
        xf[i] = orig - eps
        lo = f(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * eps)
    return grad


def numerical_jacobian(
    f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference Jacobian of a vector-valued function, shape (m, n)."""
    x = np.asarray(x, dtype=np.float64)
    xf = x.reshape(-1)
    cols = []
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + eps
        hi = np.array(f(x), dtype=np.float64).reshape(-1)  # materialize, never a view
        xf[i] = orig - eps
        lo = np.array(f(x), dtype=np.float64).reshape(-1)
        xf[i] = orig
        cols.append((hi - lo) / (2.0 * eps))
    return np.stack(cols, axis=1)


def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Elementwise |a - b| / max(1, |a|, |b|), reduced with max."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
