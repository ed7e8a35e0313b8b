"""
Finite-difference oracles for checking tape gradients
"""

from typing import Callable

import numpy as np

from .tensor import Tensor, grad, parameter


def numerical_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64, copy=True)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    out_flat = out.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        f_plus = fn(x)
        flat[i] = saved - eps
        f_minus = fn(x)
        flat[i] = saved
        out_flat[i] = (f_plus - f_minus) / (2.0 * eps)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||, floor)"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b)) / scale


def check_gradient(fn: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-4) -> float:
    """Relative error between the tape gradient of ``sum(fn(x))`` and central differences."""
    x_param = parameter(x)
    (analytic,) = grad([fn(x_param).sum()], [x_param])

    def scalar(values: np.ndarray) -> float:
        return float(fn(Tensor(values)).data.sum())

    return relative_error(analytic.data, numerical_gradient(scalar, x, eps))
