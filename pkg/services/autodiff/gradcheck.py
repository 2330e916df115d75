"""Central finite differences, the reference every backward pass is checked against."""
from typing import Callable, Union

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor


def finite_difference_grad(
    f: Callable[[Tensor], Union[Tensor, float]],
    x: Tensor,
    eps: float = 1e-5,
) -> Tensor:
    if not eps > 0:
        raise ShapeError(f"eps must be positive, got {eps}")
    x.data = np.ascontiguousarray(x.data)
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = _scalar(f(x))
        flat[i] = orig - eps
        minus = _scalar(f(x))
        flat[i] = orig
        out[i] = (plus - minus) / (2 * eps)
    return Tensor(grad)


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, s) over all elements.

    s is the larger of ``floor`` and 1e-3 of the largest gradient entry, so
    components that are numerically zero do not dominate the ratio.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    s = max(floor, 1e-3 * float(np.max(np.abs(a), initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), s)
    return float(np.max(np.abs(a - n) / denom))
