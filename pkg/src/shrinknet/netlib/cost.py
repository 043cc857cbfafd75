"""Analytical cost model: multiply-adds, parameter counts and storage bytes."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Union

import numpy as np

from .layers import BatchNorm, Conv, Dense, ModelSpec, infer_shapes
from .model import Model

# Reference sizes of the full-scale networks; documentation only.
REFERENCE_SIZES = {
    "ResNet-50": {"params_m": 25.6, "size_mb": 98.8},
    "ResNet-8": {"params_m": 0.075, "size_mb": 0.49},
}

SPARSE_COUNT_BYTES = 8  # u64 nnz
SPARSE_ENTRY_BYTES = 4 + 4  # u32 flat index + f32 value
DENSE_VALUE_BYTES = 4


def count_madds(spec: ModelSpec) -> tuple[dict[str, int], int]:
    """Per-layer and total multiply-adds.

    Convolutions cost W·H·ch_in·ch_out·K·K / groups with W, H the layer's
    input resolution; dense layers cost F_in·F_out; everything else is free.
    """
    per_layer: dict[str, int] = {}
    for layer, entry in zip(spec.layers, infer_shapes(spec)):
        if isinstance(layer, Conv):
            h, w, _ = entry.in_shape
            per_layer[layer.name] = w * h * layer.in_ch * layer.out_ch * layer.kernel * layer.kernel // layer.groups
        elif isinstance(layer, Dense):
            per_layer[layer.name] = layer.features_in * layer.features_out
        else:
            per_layer[layer.name] = 0
    return per_layer, sum(per_layer.values())


def _param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for layer in spec.layers:
        if isinstance(layer, Conv):
            shapes[f"{layer.name}.weight"] = (layer.out_ch, layer.in_ch // layer.groups, layer.kernel, layer.kernel)
            shapes[f"{layer.name}.bias"] = (layer.out_ch,)
        elif isinstance(layer, Dense):
            shapes[f"{layer.name}.weight"] = (layer.features_out, layer.features_in)
            shapes[f"{layer.name}.bias"] = (layer.features_out,)
        elif isinstance(layer, BatchNorm):
            shapes[f"{layer.name}.gamma"] = (layer.channels,)
            shapes[f"{layer.name}.beta"] = (layer.channels,)
    return shapes


def count_params(model: Union[Model, ModelSpec]) -> tuple[int, dict[str, int]]:
    """Total and per-tensor learnable parameter counts (weights, biases, BN affine)."""
    spec = model.spec if isinstance(model, Model) else model
    per_tensor = {name: int(math.prod(shape)) for name, shape in _param_shapes(spec).items()}
    return sum(per_tensor.values()), per_tensor


def dense_bytes(model: Union[Model, ModelSpec]) -> int:
    return DENSE_VALUE_BYTES * count_params(model)[0]


def sparse_tensor_bytes(nnz: int) -> int:
    return SPARSE_COUNT_BYTES + SPARSE_ENTRY_BYTES * nnz


def sparse_bytes(model: Model) -> int:
    """Parameter payload bytes under sparse storage.

    Prunable weights pay 8 + 8·nnz; biases and BN parameters stay dense.
    """
    prunable = set(model.prunable_names())
    total = 0
    for name, p in model.params.items():
        if name in prunable:
            total += sparse_tensor_bytes(int(np.count_nonzero(model.effective_weight(name))))
        else:
            total += DENSE_VALUE_BYTES * p.size
    return total


@dataclass
class CostReport:
    total_params: int
    total_madds: int
    dense_bytes: int
    sparse_bytes: int
    nonzero_params: int
    cr_params: float

    def to_json(self) -> str:
        d = asdict(self)
        if math.isinf(d["cr_params"]):
            d["cr_params"] = "inf"
        return json.dumps(d, sort_keys=True)


def cost_report(model: Model) -> CostReport:
    from ..pruning import compression_ratio

    total, _ = count_params(model)
    nonzero = sum(int(np.count_nonzero(model.effective_weight(n) if n in model.masks else p.data)) for n, p in model.params.items())
    return CostReport(
        total_params=total,
        total_madds=count_madds(model.spec)[1],
        dense_bytes=DENSE_VALUE_BYTES * total,
        sparse_bytes=sparse_bytes(model),
        nonzero_params=nonzero,
        cr_params=compression_ratio(model).cr_params,
    )
