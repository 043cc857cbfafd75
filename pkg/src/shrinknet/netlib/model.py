"""Parameterised models built from a :class:`ModelSpec`."""

from __future__ import annotations

import copy
from typing import Optional

import numpy as np

from .. import ops
from ..tensor import Tensor, no_grad
from .layers import BatchNorm, Conv, Dense, Dropout, GlobalAvgPool, ModelSpec, ReLU, ResidualAdd, SpecError, infer_shapes


class Model:
    """Named parameters, BN buffers and prune masks for one spec.

    Conv and dense weights are prunable; each carries a boolean mask and the
    forward pass always uses ``mask ⊙ weight``.
    """

    def __init__(self, spec: ModelSpec, params: dict, buffers: dict, masks: dict, seed: int = 0):
        self.spec = spec
        self.trace = infer_shapes(spec)
        self.params: dict[str, Tensor] = params
        self.buffers: dict[str, np.ndarray] = buffers
        self.masks: dict[str, np.ndarray] = masks
        self.mode = "eval"
        self.rng = np.random.default_rng(seed)
        self._skip_sources = {l.skip_from for l in spec.layers if isinstance(l, ResidualAdd)}

    # ------------------------------------------------------------------ modes
    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "eval"
        return self

    @property
    def training(self) -> bool:
        return self.mode == "train"

    # ------------------------------------------------------------ parameters
    def prunable_names(self) -> list[str]:
        """Conv/dense weight names in declaration order."""
        return [f"{l.name}.weight" for l in self.spec.layers if isinstance(l, (Conv, Dense))]

    def effective_weight(self, name: str) -> np.ndarray:
        w = self.params[name].data
        mask = self.masks.get(name)
        return w if mask is None else np.where(mask, w, 0).astype(w.dtype)

    def copy(self) -> "Model":
        clone = copy.deepcopy(self)
        for p in clone.params.values():
            p.grad = None
        return clone

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype if self.params else np.dtype(np.float32)

    # --------------------------------------------------------------- forward
    def forward(self, x, upto: Optional[str] = None) -> Tensor:
        """Run layers in order; stop after layer ``upto`` when given."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        expected = tuple(self.spec.input_shape)
        if x.ndim != len(expected) + 1 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"input batch shape {x.shape} does not match model input (N, {', '.join(map(str, expected))})")
        training = self.training
        saved: dict[str, Tensor] = {}
        for layer in self.spec.layers:
            name = layer.name
            if isinstance(layer, Conv):
                w = ops.masked(self.params[f"{name}.weight"], self.masks[f"{name}.weight"])
                x = ops.conv2d(x, w, self.params[f"{name}.bias"], stride=layer.stride, pad=layer.pad, groups=layer.groups)
            elif isinstance(layer, Dense):
                w = ops.masked(self.params[f"{name}.weight"], self.masks[f"{name}.weight"])
                x = ops.dense(x, w, self.params[f"{name}.bias"])
            elif isinstance(layer, BatchNorm):
                x = ops.batchnorm(
                    x,
                    self.params[f"{name}.gamma"],
                    self.params[f"{name}.beta"],
                    self.buffers[f"{name}.running_mean"],
                    self.buffers[f"{name}.running_var"],
                    training=training,
                )
            elif isinstance(layer, ReLU):
                x = ops.relu(x)
            elif isinstance(layer, Dropout):
                x = ops.dropout(x, layer.p, training=training, rng=self.rng)
            elif isinstance(layer, GlobalAvgPool):
                x = ops.global_avg_pool(x)
            elif isinstance(layer, ResidualAdd):
                x = ops.add(x, saved[layer.skip_from])
            if name in self._skip_sources:
                saved[name] = x
            if name == upto:
                break
        return x

    __call__ = forward

    def logits(self, x) -> Tensor:
        return self.forward(x)


def build(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    """He-uniform weights, zero biases, unit BN scale, all-ones masks."""
    trace = infer_shapes(spec)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    masks: dict[str, np.ndarray] = {}
    for layer, entry in zip(spec.layers, trace):
        name = layer.name
        if isinstance(layer, Conv):
            shape = (layer.out_ch, layer.in_ch // layer.groups, layer.kernel, layer.kernel)
            fan_in = shape[1] * layer.kernel * layer.kernel
            bound = np.sqrt(6.0 / fan_in)
            params[f"{name}.weight"] = Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)
            params[f"{name}.bias"] = Tensor(np.zeros(layer.out_ch, dtype=dtype), requires_grad=True)
            masks[f"{name}.weight"] = np.ones(shape, dtype=bool)
        elif isinstance(layer, Dense):
            shape = (layer.features_out, layer.features_in)
            bound = np.sqrt(6.0 / layer.features_in)
            params[f"{name}.weight"] = Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)
            params[f"{name}.bias"] = Tensor(np.zeros(layer.features_out, dtype=dtype), requires_grad=True)
            masks[f"{name}.weight"] = np.ones(shape, dtype=bool)
        elif isinstance(layer, BatchNorm):
            params[f"{name}.gamma"] = Tensor(np.ones(layer.channels, dtype=dtype), requires_grad=True)
            params[f"{name}.beta"] = Tensor(np.zeros(layer.channels, dtype=dtype), requires_grad=True)
            buffers[f"{name}.running_mean"] = np.zeros(layer.channels, dtype=dtype)
            buffers[f"{name}.running_var"] = np.ones(layer.channels, dtype=dtype)
    return Model(spec, params, buffers, masks, seed=seed)


def forward_embed(model: Model, batch) -> np.ndarray:
    """Embeddings (N, E) for an image batch, in the model's current mode."""
    with no_grad():
        out = model.forward(batch, upto=model.spec.embedding_layer)
    if out.ndim != 2:
        raise SpecError(f"embedding output has shape {out.shape}; expected (N, E)")
    return out.data
