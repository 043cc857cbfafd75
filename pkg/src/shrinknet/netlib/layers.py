"""Layer and model specifications plus shape inference."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Union


class SpecError(ValueError):
    """A model specification is malformed or fails shape inference."""


@dataclass(frozen=True)
class Conv:
    name: str
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    pad: int = 0
    groups: int = 1


@dataclass(frozen=True)
class Dense:
    name: str
    features_in: int
    features_out: int


@dataclass(frozen=True)
class BatchNorm:
    name: str
    channels: int


@dataclass(frozen=True)
class ReLU:
    name: str


@dataclass(frozen=True)
class Dropout:
    name: str
    p: float = 0.0


@dataclass(frozen=True)
class GlobalAvgPool:
    name: str


@dataclass(frozen=True)
class ResidualAdd:
    """Adds the output of an earlier layer ``skip_from`` to the running activation."""

    name: str
    skip_from: str


LayerSpec = Union[Conv, Dense, BatchNorm, ReLU, Dropout, GlobalAvgPool, ResidualAdd]
LAYER_KINDS = {cls.__name__: cls for cls in (Conv, Dense, BatchNorm, ReLU, Dropout, GlobalAvgPool, ResidualAdd)}


def layer_to_dict(layer: LayerSpec) -> dict:
    return {"kind": type(layer).__name__, **asdict(layer)}


def layer_from_dict(d: dict) -> LayerSpec:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in LAYER_KINDS:
        raise SpecError(f"unknown layer kind {kind!r}")
    return LAYER_KINDS[kind](**d)


@dataclass(frozen=True)
class TraceEntry:
    name: str
    kind: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layers plus input geometry.

    ``input_shape`` is (H, W, C) for image models or (F,) for feature models.
    ``embedding_layer`` names the layer whose output is the identity
    embedding; ``None`` means the final output.
    """

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...] = (32, 32, 1)
    embedding_dim: int = 64
    num_classes: int = 0
    embedding_layer: Optional[str] = None
    name: str = "model"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "layers": [layer_to_dict(l) for l in self.layers],
            "input_shape": list(self.input_shape),
            "embedding_dim": self.embedding_dim,
            "num_classes": self.num_classes,
            "embedding_layer": self.embedding_layer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            layers=tuple(layer_from_dict(l) for l in d["layers"]),
            input_shape=tuple(d["input_shape"]),
            embedding_dim=int(d["embedding_dim"]),
            num_classes=int(d["num_classes"]),
            embedding_layer=d.get("embedding_layer"),
            name=d.get("name", "model"),
        )


def _conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def infer_shapes(spec: ModelSpec) -> list[TraceEntry]:
    """Run shape inference, returning one trace entry per layer.

    Raises SpecError naming the first offending layer.
    """
    if not spec.input_shape or any(int(d) < 1 for d in spec.input_shape):
        raise SpecError(f"input shape {spec.input_shape} must be positive")
    shape = tuple(int(d) for d in spec.input_shape)
    outputs: dict[str, tuple[int, ...]] = {}
    trace: list[TraceEntry] = []
    for layer in spec.layers:
        name = layer.name
        if name in outputs:
            raise SpecError(f"layer {name!r}: duplicate layer name")
        if isinstance(layer, Conv):
            if len(shape) != 3:
                raise SpecError(f"layer {name!r}: Conv needs (H, W, C) input, got {shape}")
            h, w, c = shape
            if layer.kernel < 1 or layer.stride < 1 or layer.pad < 0:
                raise SpecError(f"layer {name!r}: kernel/stride must be >= 1 and pad >= 0")
            if c != layer.in_ch:
                raise SpecError(f"layer {name!r}: expects in_ch={layer.in_ch}, input has {c}")
            if layer.groups < 1 or layer.in_ch % layer.groups or layer.out_ch % layer.groups:
                raise SpecError(
                    f"layer {name!r}: groups={layer.groups} must divide in_ch={layer.in_ch} and out_ch={layer.out_ch}"
                )
            ho, wo = _conv_out(h, layer.kernel, layer.stride, layer.pad), _conv_out(w, layer.kernel, layer.stride, layer.pad)
            if ho < 1 or wo < 1:
                raise SpecError(f"layer {name!r}: kernel {layer.kernel} does not fit input {h}x{w}")
            out = (ho, wo, layer.out_ch)
        elif isinstance(layer, Dense):
            if len(shape) != 1:
                raise SpecError(f"layer {name!r}: Dense needs flat input, got {shape}")
            if shape[0] != layer.features_in:
                raise SpecError(f"layer {name!r}: expects F_in={layer.features_in}, input has {shape[0]}")
            if layer.features_out < 1:
                raise SpecError(f"layer {name!r}: F_out must be >= 1")
            out = (layer.features_out,)
        elif isinstance(layer, BatchNorm):
            if shape[-1] != layer.channels:
                raise SpecError(f"layer {name!r}: expects {layer.channels} channels, input has {shape[-1]}")
            out = shape
        elif isinstance(layer, Dropout):
            if not 0 <= layer.p < 1:
                raise SpecError(f"layer {name!r}: dropout p={layer.p} outside [0, 1)")
            out = shape
        elif isinstance(layer, ReLU):
            out = shape
        elif isinstance(layer, GlobalAvgPool):
            if len(shape) != 3:
                raise SpecError(f"layer {name!r}: GlobalAvgPool needs (H, W, C) input, got {shape}")
            out = (shape[2],)
        elif isinstance(layer, ResidualAdd):
            if layer.skip_from not in outputs:
                raise SpecError(f"layer {name!r}: skip_from {layer.skip_from!r} is not an earlier layer")
            if outputs[layer.skip_from] != shape:
                raise SpecError(
                    f"layer {name!r}: skip shape {outputs[layer.skip_from]} does not match {shape}"
                )
            out = shape
        else:
            raise SpecError(f"layer {name!r}: unsupported layer type {type(layer).__name__}")
        trace.append(TraceEntry(name, type(layer).__name__, shape, out))
        outputs[name] = out
        shape = out
    if spec.embedding_layer is not None and spec.embedding_layer not in outputs:
        raise SpecError(f"embedding_layer {spec.embedding_layer!r} is not a layer")
    return trace


def check_head(spec: ModelSpec) -> None:
    """Check the embedding head: BN -> Dropout -> Dense(., E) -> BN -> Dense(E, classes)."""
    tail = spec.layers[-5:]
    kinds = [type(l).__name__ for l in tail]
    if kinds != ["BatchNorm", "Dropout", "Dense", "BatchNorm", "Dense"]:
        raise SpecError(f"head must be BatchNorm, Dropout, Dense, BatchNorm, Dense; got {kinds}")
    if tail[2].features_out != spec.embedding_dim or tail[4].features_in != spec.embedding_dim:
        raise SpecError("head Dense sizes do not match embedding_dim")
    if tail[4].features_out != spec.num_classes:
        raise SpecError("classifier width does not match num_classes")
    if spec.embedding_layer != tail[3].name:
        raise SpecError("embedding_layer must be the BatchNorm after the embedding Dense")
