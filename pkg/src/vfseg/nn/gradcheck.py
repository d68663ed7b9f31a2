"""Central finite-difference gradient oracle and comparison helpers."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .params import Tensor


def finite_difference_grad(f: Callable[[Tensor], float], x: Tensor,
                           h: float = 1e-6) -> Tensor:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per element.

    f must not mutate its argument; x is restored exactly after each probe.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(x)
        flat[i] = orig - h
        f_minus = f(x)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def finite_difference_grad_at(f: Callable[[], float], array: Tensor,
                              flat_indices: np.ndarray, h: float = 1e-6) -> Tensor:
    """Central differences for selected coordinates of an in-place array.

    f is a closure reading `array`; each probed coordinate is perturbed in
    place and restored, so whole-model checks stay affordable.
    """
    flat = array.reshape(-1)
    out = np.zeros(len(flat_indices))
    for j, i in enumerate(flat_indices):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f()
        flat[i] = orig - h
        f_minus = f()
        flat[i] = orig
        out[j] = (f_plus - f_minus) / (2.0 * h)
    return out


def max_rel_err(analytic: Tensor, numeric: Tensor) -> float:
    """Worst-case elementwise |a - n| / max(1, |a|, |n|).

    The unit floor turns the comparison into an absolute one for
    near-zero gradients, where finite differences only carry noise.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))
