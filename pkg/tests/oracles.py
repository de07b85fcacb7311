"""Independent reference computations used by the tests.

Nothing here calls the engine's backward pass or retention analysis.
"""
from __future__ import annotations

import numpy as np


def central_difference(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (x is perturbed and restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        g[i] = (hi - lo) / (2 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two tensors' max magnitudes."""
    scale = max(float(np.abs(analytic).max(initial=0)), float(np.abs(numeric).max(initial=0)), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0)) / scale


def required_saved(kinds_params: list[tuple[bool, tuple[str, ...], tuple[str, ...]]],
                   trainable_mask: list[bool]) -> list[set[str]]:
    """Dependency walk from every trainable node to the loss.

    ``kinds_params[i] = (parameterized, weight_names, input_names)``. A trainable
    node ``j`` needs its own weight-grad tensors, and the gradient at its output
    must pass through every node downstream of it, each of which then needs its
    input-grad tensors.
    """
    n = len(kinds_params)
    need = [set() for _ in range(n)]
    for j in range(n):
        if not (kinds_params[j][0] and trainable_mask[j]):
            continue
        need[j] |= set(kinds_params[j][1])
        for k in range(j + 1, n):
            need[k] |= set(kinds_params[k][2])
    return need


def dense_chain_memory(shapes: list[int], trainable: list[bool], batch: int, width: int) -> int:
    """Weight-grad bytes for a dense chain: each trainable layer keeps its input."""
    return sum(shapes[i] * batch * width for i, t in enumerate(trainable) if t)
