"""Central finite-difference gradients, used as an independent oracle."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def numerical_grad(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """d fn / d arr by central differences; ``arr`` is perturbed in place and restored."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-10:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(fn: Callable[[], float], arrays: Sequence[np.ndarray],
                    analytic: Sequence[np.ndarray], h: float = 1e-6) -> list[float]:
    """Relative error of each analytic gradient against finite differences."""
    return [relative_error(a, numerical_grad(fn, arr, h)) for arr, a in zip(arrays, analytic)]


def gradcheck(build: Callable[[dict], "object"], arrays: dict[str, np.ndarray],
              h: float = 1e-6) -> dict[str, float]:
    """Relative error per input of the tape gradient of ``build`` vs. finite differences.

    ``build`` maps a dict of Tensors to a scalar Tensor and must be a pure
    function of the array values.
    """
    from .engine import Tensor, backward, no_grad

    leaves = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    backward(build(leaves))

    def value() -> float:
        with no_grad():
            return build({k: Tensor(v) for k, v in arrays.items()}).item()

    errors = {}
    for k, arr in arrays.items():
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(arr)
        errors[k] = relative_error(analytic, numerical_grad(value, arr, h))
    return errors
