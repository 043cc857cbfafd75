"""Central finite-difference gradient checking for float64 tensors."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numeric_grad(fn: Callable[[], float], array: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """d fn / d array by central differences, perturbing ``array`` in place."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn()
        flat[i] = old - h
        down = fn()
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(diff / scale)


def check_gradients(
    forward: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[Tensor],
    rng: np.random.Generator,
    h: float = 1e-6,
) -> float:
    """Worst relative error over inputs of ``forward``'s analytic vs numeric gradient.

    Non-scalar outputs are reduced with a fixed random projection so every
    output element contributes.
    """
    probe = None

    def scalar(out: Tensor) -> Tensor:
        nonlocal probe
        if out.size == 1:
            return out
        if probe is None:
            probe = rng.standard_normal(out.shape)
        from . import ops

        return ops.sum_all(ops.mul(out, Tensor(probe)))

    for t in inputs:
        t.grad = None
    backward(scalar(forward(inputs)))
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        def value() -> float:
            with no_grad():
                return scalar(forward(inputs)).item()

        numeric = numeric_grad(value, t.data, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
