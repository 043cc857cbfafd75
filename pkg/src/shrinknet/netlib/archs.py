"""Miniature teacher and student architectures.

These keep the structural ideas of the large networks (identity shortcuts,
depthwise-separable blocks) at a size that trains on one CPU core in minutes.
"""

from __future__ import annotations

from .layers import BatchNorm, Conv, Dense, Dropout, GlobalAvgPool, ModelSpec, ReLU, ResidualAdd


def _head(channels: int, embedding_dim: int, num_classes: int, dropout: float) -> list:
    return [
        GlobalAvgPool("pool"),
        BatchNorm("head_bn", channels),
        Dropout("head_drop", dropout),
        Dense("embed", channels, embedding_dim),
        BatchNorm("embed_bn", embedding_dim),
        Dense("classifier", embedding_dim, num_classes),
    ]


def _conv_bn_relu(name: str, cin: int, cout: int, k: int = 3, stride: int = 1, groups: int = 1, relu: bool = True) -> list:
    layers = [Conv(name, cin, cout, k, stride, k // 2, groups), BatchNorm(f"{name}_bn", cout)]
    if relu:
        layers.append(ReLU(f"{name}_relu"))
    return layers


def mini_teacher(
    input_shape=(32, 32, 1),
    embedding_dim: int = 64,
    num_classes: int = 50,
    width: int = 32,
    dropout: float = 0.2,
) -> ModelSpec:
    """Stem, two residual blocks with a strided transition between them, then the head.

    Six convolutions in total.
    """
    c = input_shape[-1]
    w1, w2 = width, 2 * width
    layers = [
        *_conv_bn_relu("stem", c, w1, stride=2),
        *_conv_bn_relu("block1a", w1, w1),
        *_conv_bn_relu("block1b", w1, w1, relu=False),
        ResidualAdd("block1_add", skip_from="stem_relu"),
        ReLU("block1_relu"),
        *_conv_bn_relu("transition", w1, w2, stride=2),
        *_conv_bn_relu("block2a", w2, w2),
        *_conv_bn_relu("block2b", w2, w2, relu=False),
        ResidualAdd("block2_add", skip_from="transition_relu"),
        ReLU("block2_relu"),
        *_head(w2, embedding_dim, num_classes, dropout),
    ]
    return ModelSpec(tuple(layers), tuple(input_shape), embedding_dim, num_classes, "embed_bn", "mini_teacher")


def student_plain(
    input_shape=(32, 32, 1),
    embedding_dim: int = 64,
    num_classes: int = 50,
    widths=(8, 16, 16),
    dropout: float = 0.2,
) -> ModelSpec:
    """Three plain strided 3x3 convolutions."""
    c = input_shape[-1]
    layers = []
    for i, w in enumerate(widths, 1):
        layers += _conv_bn_relu(f"conv{i}", c, w, stride=2)
        c = w
    layers += _head(c, embedding_dim, num_classes, dropout)
    return ModelSpec(tuple(layers), tuple(input_shape), embedding_dim, num_classes, "embed_bn", "student_plain")


def student_depthwise(
    input_shape=(32, 32, 1),
    embedding_dim: int = 64,
    num_classes: int = 50,
    widths=(8, 16, 16),
    dropout: float = 0.2,
) -> ModelSpec:
    """Three depthwise-separable blocks: depthwise 3x3 (groups = in_ch) then pointwise 1x1."""
    c = input_shape[-1]
    layers = []
    for i, w in enumerate(widths, 1):
        layers += _conv_bn_relu(f"dw{i}", c, c, k=3, stride=2, groups=c)
        layers += _conv_bn_relu(f"pw{i}", c, w, k=1)
        c = w
    layers += _head(c, embedding_dim, num_classes, dropout)
    return ModelSpec(tuple(layers), tuple(input_shape), embedding_dim, num_classes, "embed_bn", "student_depthwise")


ARCHITECTURES = {
    "mini_teacher": mini_teacher,
    "student_plain": student_plain,
    "student_depthwise": student_depthwise,
}
