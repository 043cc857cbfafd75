"""First-order optimizers with optional prune masks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .tensor import Tensor

OPTIMIZER_KINDS = ("sgd_momentum", "adam")


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"optimizer kind must be one of {OPTIMIZER_KINDS}, got {self.kind!r}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def optimizer_step(
    state: OptimizerState,
    params: Mapping[str, Tensor],
    masks: Optional[Mapping[str, np.ndarray]] = None,
) -> None:
    """Update ``params`` in place from their ``.grad``.

    Where a mask is 0 the parameter is written as +0.0 after the update, so
    pruned weights stay exactly zero through fine-tuning.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    masks = masks or {}
    for name, mask in masks.items():
        if name in params and mask.shape != params[name].shape:
            raise ValueError(f"mask for {name!r} has shape {mask.shape}, parameter has {params[name].shape}")

    state.step_count += 1
    t = state.step_count
    for name, p in params.items():
        g = p.grad
        buf = state.buffers.setdefault(name, {})
        if state.kind == "sgd_momentum":
            if state.momentum:
                v = buf.get("velocity")
                v = g.copy() if v is None else state.momentum * v + g
                buf["velocity"] = v
                p.data -= (state.lr * v).astype(p.dtype)
            else:
                p.data -= (state.lr * g).astype(p.dtype)
        else:
            m = buf.get("m", np.zeros_like(p.data))
            v = buf.get("v", np.zeros_like(p.data))
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            buf["m"], buf["v"] = m, v
            m_hat = m / (1 - state.beta1 ** t)
            v_hat = v / (1 - state.beta2 ** t)
            p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
        mask = masks.get(name)
        if mask is not None:
            p.data[mask == 0] = 0.0
