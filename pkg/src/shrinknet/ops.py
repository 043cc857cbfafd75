"""Differentiable ops over :class:`~shrinknet.tensor.Tensor`.

Image tensors are NHWC.  Convolution weights are ``(out, in // groups, K, K)``
and dense weights ``(out, in)``.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, record


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


def _check_finite(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"{op}: input of shape {t.shape} contains non-finite values")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise / structural -------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("add", a, b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(out, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("mul", a, b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(out, (a, b), backward, "mul")


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.mean(), dtype=a.dtype)
    n = a.size
    return record(out, (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),), "mean")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    return record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def _keep_bits(keep: np.ndarray, a: np.ndarray) -> np.ndarray:
    """``a`` where ``keep`` else +0.0, as a bitwise AND.

    Branch-free, so a scattered prune mask costs no more than an all-ones one
    (np.where slows down about 2.5x on unpredictable masks).
    """
    a = np.ascontiguousarray(a)
    uint = np.dtype(f"u{a.dtype.itemsize}")
    return (a.view(uint) & np.negative(keep.astype(uint))).view(a.dtype)


def masked(w: Tensor, mask: np.ndarray) -> Tensor:
    """Effective weight ``mask ⊙ w``; masked positions are exactly +0.0 whatever w holds."""
    if mask.shape != w.shape:
        raise ShapeError(f"masked: mask {mask.shape} vs weight {w.shape}")
    keep = mask.astype(bool)
    out = _keep_bits(keep, w.data)
    _check_finite("masked", Tensor(out))
    return record(out, (w,), lambda g: (_keep_bits(keep, g),), "masked")


def relu(x: Tensor) -> Tensor:
    _check_finite("relu", x)
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype)
    return record(out, (x,), lambda g: (np.where(pos, g, 0).astype(g.dtype),), "relu")


# --- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("matmul", a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return record(out, (a, b), backward, "matmul")


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ w.T + b`` for x of shape (N, F_in) and w of shape (F_out, F_in)."""
    _check_finite("dense", x, w, *([b] if b is not None else []))
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"dense: bias {b.shape} does not match F_out={w.shape[0]}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ w.data
        gw = g.T @ x.data
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return record(out, parents, backward, "dense")


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
    groups: int = 1,
) -> Tensor:
    """Exact grouped 2-D convolution via im2col.

    x is (N, H, W, C); w is (O, C // groups, K, K).
    """
    _check_finite("conv2d", x, w, *([b] if b is not None else []))
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    n, h, wd, c = x.shape
    o, cg, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"conv2d: non-square kernel {k}x{k2}")
    if groups < 1 or c % groups or o % groups:
        raise ShapeError(f"conv2d: groups={groups} must divide in_ch={c} and out_ch={o}")
    if cg != c // groups:
        raise ShapeError(f"conv2d: weight expects {cg * groups} input channels, input has {c}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias {b.shape} does not match out_ch={o}")
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(wd, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} with pad {pad} does not fit input {h}x{wd}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    m = n * ho * wo
    cols = win.reshape(m, c * k * k)
    og = o // groups
    if groups == 1:
        wmat = w.data.reshape(o, -1)
        out = cols @ wmat.T
    else:
        colsg = cols.reshape(m, groups, cg * k * k).transpose(1, 0, 2)
        wg = w.data.reshape(groups, og, cg * k * k)
        out = (colsg @ wg.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(m, o)
    if b is not None:
        out = out + b.data
    out = out.reshape(n, ho, wo, o)

    def backward(g):
        gm = g.reshape(m, o)
        if groups == 1:
            gw = (gm.T @ cols).reshape(w.shape)
            gcols = gm @ wmat
        else:
            gmg = gm.reshape(m, groups, og).transpose(1, 0, 2)
            gw = (gmg.transpose(0, 2, 1) @ colsg).reshape(w.shape)
            gcols = (gmg @ wg).transpose(1, 0, 2).reshape(m, c * k * k)
        gcols = gcols.reshape(n, ho, wo, c, k, k)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += gcols[..., i, j]
        gx = gxp[:, pad : pad + h, pad : pad + wd, :] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return record(out, parents, backward, "conv2d")


# --- normalisation / regularisation --------------------------------------------


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalise over every axis but the last (channels / features).

    In training mode the running statistics are updated in place with an
    exponential moving average; the variance estimate stored there is unbiased.
    """
    _check_finite("batchnorm", x, gamma, beta)
    ch = x.shape[-1]
    if gamma.shape != (ch,) or beta.shape != (ch,):
        raise ShapeError(f"batchnorm: affine params {gamma.shape} do not match {ch} channels")
    axes = tuple(range(x.ndim - 1))
    if training:
        count = x.size // ch
        if count < 2:
            raise ShapeError(f"batchnorm: training mode needs more than one value per channel, got {x.shape}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data
        if training:
            n = x.size // ch
            gx = inv_std / n * (n * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        else:
            gx = gxhat * inv_std
        return gx.astype(x.dtype), ggamma, gbeta

    return record(out.astype(x.dtype), (x, gamma, beta), backward, "batchnorm")


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; eval mode (or p == 0) returns the input unchanged."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    _check_finite("dropout", x)
    if not training or p == 0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return record(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, H, W, C) -> (N, C)."""
    _check_finite("global_avg_pool", x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected NHWC input, got {x.shape}")
    n, h, w, c = x.shape
    out = x.data.mean(axis=(1, 2))

    def backward(g):
        return (np.broadcast_to(g[:, None, None, :], x.shape) / (h * w)).astype(x.dtype),

    return record(out, (x,), backward, "global_avg_pool")


# --- probabilistic heads ---------------------------------------------------------


def _softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite("softmax", x)
    s = _softmax_np(x.data, axis)

    def backward(g):
        return s * (g - (g * s).sum(axis=axis, keepdims=True)),

    return record(s, (x,), backward, "softmax")


def _check_labels(op: str, logits: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"{op}: logits must be (N, classes), got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"{op}: labels shape {labels.shape} does not match batch {logits.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"{op}: labels outside [0, {logits.shape[1]})")
    return labels.astype(np.int64)


def cross_entropy_with_softmax(logits: Tensor, labels) -> Tensor:
    """Batch-mean categorical cross-entropy of integer labels."""
    _check_finite("cross_entropy_with_softmax", logits)
    labels = _check_labels("cross_entropy_with_softmax", logits, labels)
    n = logits.shape[0]
    logp = _log_softmax_np(logits.data)
    loss = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype)

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1
        return (grad * (g / n)).astype(logits.dtype),

    return record(loss, (logits,), backward, "cross_entropy_with_softmax")


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Batch mean of KL(p_i || q_i) over rows of two probability matrices.

    Zero entries of p contribute nothing (0 log 0 = 0).
    """
    _check_finite("kl_divergence", p, q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence: shapes differ {p.shape} vs {q.shape}")
    if (p.data < 0).any() or ((q.data <= 0) & (p.data > 0)).any():
        raise ValueError("kl_divergence: p must be >= 0 and q > 0 wherever p > 0")
    pd = p.data if p.ndim > 1 else p.data[None, :]
    qd = q.data if q.ndim > 1 else q.data[None, :]
    n = pd.shape[0]
    support = pd > 0
    safe_p = np.where(support, pd, 1)
    safe_q = np.where(support, qd, 1)
    log_ratio = np.where(support, np.log(safe_p) - np.log(safe_q), 0)
    loss = np.asarray((pd * log_ratio).sum() / n, dtype=p.dtype)

    def backward(g):
        gp = np.where(support, log_ratio + 1, 0) * (g / n)
        gq = np.where(support, -pd / safe_q, 0) * (g / n)
        return gp.reshape(p.shape).astype(p.dtype), gq.reshape(q.shape).astype(q.dtype)

    return record(loss, (p, q), backward, "kl_divergence")


_OPS = {
    "add": add,
    "mul": mul,
    "sum": sum_all,
    "mean": mean_all,
    "reshape": reshape,
    "masked": masked,
    "matmul": matmul,
    "dense": dense,
    "conv2d": conv2d,
    "relu": relu,
    "batchnorm": batchnorm,
    "dropout": dropout,
    "global_avg_pool": global_avg_pool,
    "softmax": softmax,
    "cross_entropy_with_softmax": cross_entropy_with_softmax,
    "kl_divergence": kl_divergence,
}


def forward_op(op_kind: str, inputs, **attrs) -> Tensor:
    """Dispatch an op by name, e.g. ``forward_op("conv2d", [x, w, b], stride=2, pad=1)``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}; known: {sorted(_OPS)}") from None
    return fn(*inputs, **attrs)
