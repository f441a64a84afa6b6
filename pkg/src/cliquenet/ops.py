"""Differentiable primitives over NCHW tensors.

Every function records a backward closure on its output. Convolution is
cross-correlation (no kernel flip) and carries no bias; dense layers carry
bias. Batch statistics are taken per channel over N, H, W.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InputError, UsageError
from .tensor import Tensor, accumulate_grad, make_node

BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # new = momentum * old + (1 - momentum) * batch

TRAIN = "train"
EVAL = "eval"


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, EVAL):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")


# ---------------------------------------------------------------------------
# convolution


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Sliding (kh, kw) windows of a padded NCHW array, strided; view only."""
    w = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return w[:, :, ::stride, ::stride]


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIHW kernel, no bias.

    Output spatial size is floor((H + 2*pad - kH) / stride) + 1. Backward
    produces gradients with respect to both the input and the kernel.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-d input and kernel, got {x.ndim}-d and {kernel.ndim}-d"
        )
    n, c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise DimensionError(
            f"conv2d channel mismatch: input axis 1 has {c} channels, "
            f"kernel axis 1 expects {ci}"
        )
    if stride < 1 or pad < 0:
        raise InputError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} exceeds padded input {h + 2 * pad}x{w + 2 * pad}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wins = _windows(xp, kh, kw, stride)  # (N, C, Ho, Wo, kh, kw)
    ho, wo = wins.shape[2], wins.shape[3]
    out = np.tensordot(wins, kernel.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))  # (N, O, Ho, Wo)

    def backward(g: np.ndarray) -> None:
        dk = np.tensordot(g, wins, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)
        accumulate_grad(kernel, dk)
        if x.requires_grad or x._parents:
            # scatter-add each kernel tap back onto the padded input
            dcols = np.tensordot(g, kernel.data, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
            accumulate_grad(x, dx)

    return make_node(out, (x, kernel), backward)


# ---------------------------------------------------------------------------
# pooling


def pool(
    x: Tensor,
    mode: str,
    window: int = 2,
    stride: int | None = None,
    pad: int = 0,
) -> Tensor:
    """Spatial pooling: 'avg', 'max', or 'global_avg'.

    global_avg ignores window/stride/pad and returns the per-channel spatial
    mean with shape (N, C, 1, 1). max routes gradient to the first argmax in
    row-major scan order.
    """
    if x.ndim != 4:
        raise DimensionError(f"pool expects an NCHW tensor, got {x.ndim}-d")
    n, c, h, w = x.shape

    if mode == "global_avg":
        out = x.data.mean(axis=(2, 3), keepdims=True)

        def backward_global(g: np.ndarray) -> None:
            accumulate_grad(x, np.broadcast_to(g / (h * w), x.shape))

        return make_node(out, (x,), backward_global)

    if mode not in ("avg", "max"):
        raise UsageError(f"unknown pool mode {mode!r}")
    stride = window if stride is None else stride
    if window > h + 2 * pad or window > w + 2 * pad:
        raise DimensionError(
            f"pool window {window} exceeds padded input {h + 2 * pad}x{w + 2 * pad}"
        )

    if pad:
        fill = -np.inf if mode == "max" else 0.0
        xp = np.pad(
            x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill
        )
    else:
        xp = x.data
    wins = _windows(xp, window, window, stride)  # (N, C, Ho, Wo, k, k)
    ho, wo = wins.shape[2], wins.shape[3]

    if mode == "avg":
        out = wins.mean(axis=(4, 5))

        def backward_avg(g: np.ndarray) -> None:
            if not (x.requires_grad or x._parents):
                return
            share = g / (window * window)
            dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.data.dtype)
            for i in range(window):
                for j in range(window):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += share
            accumulate_grad(x, dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp)

        return make_node(np.ascontiguousarray(out), (x,), backward_avg)

    flat = wins.reshape(n, c, ho, wo, window * window)
    idx = flat.argmax(axis=4)  # first maximum in row-major order
    out = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]

    def backward_max(g: np.ndarray) -> None:
        if not (x.requires_grad or x._parents):
            return
        nn, cc, hh, ww = np.indices((n, c, ho, wo), sparse=False)
        rows = hh * stride + idx // window
        cols = ww * stride + idx % window
        dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.data.dtype)
        np.add.at(dxp, (nn, cc, rows, cols), g)
        accumulate_grad(x, dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp)

    return make_node(np.ascontiguousarray(out), (x,), backward_max)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Running statistics for one batchnorm site; not trainable."""

    __slots__ = ("running_mean", "running_var", "momentum", "eps")

    def __init__(self, channels: int, dtype=np.float32, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str) -> Tensor:
    """Channel-wise batch normalization with affine scale and shift.

    Train mode normalizes by batch statistics over (N, H, W) and updates the
    running stats by exponential moving average; eval mode normalizes by the
    running stats. Train mode requires N*H*W >= 2.
    """
    _check_mode(mode)
    if x.ndim != 4:
        raise DimensionError(f"batchnorm expects an NCHW tensor, got {x.ndim}-d")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batchnorm affine parameters must have shape ({c},), "
            f"got gamma {gamma.shape} and beta {beta.shape}"
        )
    if state.running_mean.shape != (c,):
        raise DimensionError(
            f"batchnorm running stats sized {state.running_mean.shape[0]}, input has {c} channels"
        )
    eps = state.eps

    if mode == TRAIN:
        m = n * h * w
        if m < 2:
            raise DimensionError(f"batchnorm train mode requires N*H*W >= 2, got {m}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.running_mean[...] = state.momentum * state.running_mean + (1 - state.momentum) * mean
        state.running_var[...] = state.momentum * state.running_var + (1 - state.momentum) * var
    else:
        mean = state.running_mean
        var = state.running_var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    if mode == TRAIN:

        def backward(g: np.ndarray) -> None:
            accumulate_grad(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            accumulate_grad(beta, g.sum(axis=(0, 2, 3)))
            if x.requires_grad or x._parents:
                m_ = n * h * w
                dxhat = g * gamma.data[None, :, None, None]
                sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (inv[None, :, None, None] / m_) * (
                    m_ * dxhat - sum_dxhat - xhat * sum_dxhat_xhat
                )
                accumulate_grad(x, dx)

    else:

        def backward(g: np.ndarray) -> None:
            accumulate_grad(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            accumulate_grad(beta, g.sum(axis=(0, 2, 3)))
            if x.requires_grad or x._parents:
                accumulate_grad(x, g * (gamma.data * inv)[None, :, None, None])

    return make_node(out.astype(x.data.dtype, copy=False), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# dense, activations, concat, dropout


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: (N, C) @ (C, O) + (O,)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(
            f"dense expects 2-d input and weight, got {x.ndim}-d and {weight.ndim}-d"
        )
    n, c = x.shape
    ci, o = weight.shape
    if ci != c:
        raise DimensionError(
            f"dense inner dimensions disagree: input axis 1 is {c}, weight axis 0 is {ci}"
        )
    if bias.shape != (o,):
        raise DimensionError(f"dense bias must have shape ({o},), got {bias.shape}")
    out = x.data @ weight.data + bias.data

    def backward(g: np.ndarray) -> None:
        accumulate_grad(x, g @ weight.data.T)
        accumulate_grad(weight, x.data.T @ g)
        accumulate_grad(bias, g.sum(axis=0))

    return make_node(out, (x, weight, bias), backward)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the derivative at 0 is taken as 0."""
    out = np.maximum(x.data, 0)

    def backward(g: np.ndarray) -> None:
        accumulate_grad(x, g * (x.data > 0))

    return make_node(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function; outputs lie strictly in (0, 1)."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g: np.ndarray) -> None:
        accumulate_grad(x, g * out * (1.0 - out))

    return make_node(out, (x,), backward)


def pointwise(x: Tensor, fn: str) -> Tensor:
    """Elementwise activation dispatch: 'relu' or 'sigmoid'."""
    if fn == "relu":
        return relu(x)
    if fn == "sigmoid":
        return sigmoid(x)
    raise UsageError(f"unknown pointwise function {fn!r}")


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1; backward splits the gradient by channel range."""
    if not inputs:
        raise UsageError("concat_channels needs at least one input")
    first = inputs[0]
    for t in inputs[1:]:
        if t.ndim != first.ndim:
            raise DimensionError(
                f"concat_channels rank mismatch: {first.ndim}-d vs {t.ndim}-d"
            )
        same = t.shape[:1] + t.shape[2:] == first.shape[:1] + first.shape[2:]
        if not same:
            raise DimensionError(
                f"concat_channels non-channel axes differ: {first.shape} vs {t.shape}"
            )
    out = np.concatenate([t.data for t in inputs], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in inputs])

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(inputs, offsets[:-1], offsets[1:]):
            accumulate_grad(t, g[:, lo:hi])

    return make_node(out, tuple(inputs), backward)


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train mode zeroes with probability ``rate`` and
    scales survivors by 1/(1-rate); eval mode is the identity."""
    _check_mode(mode)
    if not 0.0 <= rate < 1.0:
        raise InputError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == EVAL or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in train mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    scale = keep / np.asarray(1.0 - rate, dtype=x.data.dtype)
    out = x.data * scale

    def backward(g: np.ndarray) -> None:
        accumulate_grad(x, g * scale)

    return make_node(out, (x,), backward)


# ---------------------------------------------------------------------------
# loss and small glue ops


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the labelled class.

    Computed with max subtraction for stability; backward is
    (softmax - onehot) / N.
    """
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise DimensionError(f"softmax_cross_entropy expects (N, K) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise InputError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(n), labels].mean()

    def backward(g: np.ndarray) -> None:
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        accumulate_grad(logits, (g.reshape(()) / n) * p)

    return make_node(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every (h, w) plane of x[n, c] by the scalar s[n, c]."""
    if x.ndim != 4 or s.ndim != 2 or s.shape != x.shape[:2]:
        raise DimensionError(
            f"scale_channels expects NCHW and matching (N, C), got {x.shape} and {s.shape}"
        )
    factors = s.data[:, :, None, None]
    out = x.data * factors

    def backward(g: np.ndarray) -> None:
        accumulate_grad(x, g * factors)
        accumulate_grad(s, (g * x.data).sum(axis=(2, 3)))

    return make_node(out, (x, s), backward)


def flatten(x: Tensor) -> Tensor:
    """Reshape (N, ...) to (N, prod(...))."""
    n = x.shape[0]
    out = x.data.reshape(n, -1)

    def backward(g: np.ndarray) -> None:
        accumulate_grad(x, g.reshape(x.shape))

    return make_node(out, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g: np.ndarray) -> None:
        accumulate_grad(a, g)
        accumulate_grad(b, g)

    return make_node(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward(g: np.ndarray) -> None:
        accumulate_grad(a, g * b.data)
        accumulate_grad(b, g * a.data)

    return make_node(out, (a, b), backward)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g: np.ndarray) -> None:
        accumulate_grad(x, np.broadcast_to(g.reshape(()), x.shape))

    return make_node(out, (x,), backward)
