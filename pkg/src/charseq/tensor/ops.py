"""Differentiable operations over :class:`Tensor`.

Every primitive computes its forward value with numpy and registers a
backward closure through :func:`make_result`. Composite ops (``linear``,
``attention``, ``lstm_cell``) are built from primitives and need no
backward rule of their own.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from charseq.errors import DimensionError, UsageError
from charseq.tensor.autograd import Tensor, as_tensor, current_tape, make_result, unbroadcast

_GELU_C = math.sqrt(2.0 / math.pi)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result("add", a.data + b.data, (a, b),
                       lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result("sub", a.data - b.data, (a, b),
                       lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result("mul", a.data * b.data, (a, b),
                       lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def back(g):
        return (unbroadcast(g / b.data, a.shape),
                unbroadcast(-g * out / b.data, b.shape))

    return make_result("div", out, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # Batched activations times a weight matrix: fold the batch into rows.
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(*a.shape[:-1], n)

        def back_folded(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return make_result("matmul", out, (a, b), back_folded)
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def back(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_result("matmul", out, (a, b), back)


# -- unary nonlinearities ---------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return make_result("log", out, (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_result("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return make_result("relu", a.data * pos, (a,), lambda g: (g * pos,))


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return make_result("gelu", out, (a,), back)


def square(a: Tensor) -> Tensor:
    return make_result("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return make_result("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


# -- reductions and shape manipulation -------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = sorted(ax % len(shape) for ax in axes)
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return make_result("sum", out, (a,),
                       lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size // max(out.size, 1)
    return make_result("mean", out, (a,),
                       lambda g: (_expand_reduced(g / count, a.shape, axis, keepdims).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    return make_result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return make_result("transpose", np.transpose(a.data, axes), (a,),
                       lambda g: (np.transpose(g, inverse),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return make_result("swapaxes", np.swapaxes(a.data, ax1, ax2), (a,),
                       lambda g: (np.swapaxes(g, ax1, ax2),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def index(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def back(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[idx] += g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return make_result("index", np.array(out, copy=True), (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_result("concat", out, tensors, lambda g: np.split(g, sizes, axis=axis))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return make_result("stack", out, tensors,
                       lambda g: [np.take(g, i, axis=axis) for i in range(n)])


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise UsageError(f"embedding ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise UsageError(f"embedding id out of range [0, {table.shape[0]})")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return make_result("embedding", table.data[ids], (table,), back)


def gather_last(a: Tensor, targets) -> Tensor:
    """``a[..., targets[...]]``: pick one entry of the last axis per position."""
    targets = np.asarray(targets)
    out = np.take_along_axis(a.data, targets[..., None], axis=-1)[..., 0]

    def back(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, targets[..., None], g[..., None], axis=-1)
        return (ga,)

    return make_result("gather_last", out, (a,), back)


# -- normalisation, softmax, dropout ---------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", out, (a,), back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result("log_softmax", out, (a,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def back(g):
        gxhat = g * gamma.data
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result("layer_norm", out, (x, gamma, beta), back)


def dropout(x: Tensor, p: float) -> Tensor:
    """Inverted dropout; identity unless the active tape is in training mode."""
    tape = current_tape()
    if p <= 0.0 or tape is None or not tape.training:
        return x
    keep = (tape.rng.random(x.shape, dtype=np.float32) >= p).astype(x.dtype) / (1.0 - p)
    return make_result("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# -- convolution and pooling over the time axis -----------------------------

def _same_padding(length: int, width: int, stride: int) -> tuple[int, int, int]:
    out_len = -(-length // stride)
    total = max((out_len - 1) * stride + width - length, 0)
    left = total // 2
    return left, total - left, out_len


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """Cross-correlation along time. ``x``: (..., T, C_in); ``kernel``: (w, C_in, C_out).

    ``padding`` is ``"same"`` (output ceil(T/stride), odd surplus on the
    right), ``"valid"`` or ``"causal"`` (all padding on the left, so output
    step t only sees inputs <= t*stride).
    """
    if stride < 1:
        raise DimensionError(f"conv1d: stride must be >= 1, got {stride}")
    if x.ndim < 2 or kernel.ndim != 3 or kernel.shape[1] != x.shape[-1]:
        raise DimensionError(f"conv1d: input {x.shape} does not fit kernel {kernel.shape}")
    width, c_in, c_out = kernel.shape
    length = x.shape[-2]
    if padding == "same":
        left, right, _ = _same_padding(length, width, stride)
    elif padding == "causal":
        left, right = width - 1, 0
    elif padding == "valid":
        left = right = 0
    else:
        raise UsageError(f"conv1d: unknown padding {padding!r}")
    padded_len = length + left + right
    if padded_len < width:
        raise DimensionError(f"conv1d: kernel width {width} exceeds padded input length {padded_len}")
    pad_spec = [(0, 0)] * (x.ndim - 2) + [(left, right), (0, 0)]
    xp = np.pad(x.data, pad_spec)
    windows = sliding_window_view(xp, width, axis=-2)[..., ::stride, :, :]  # (..., T', C_in, w)
    out_len = windows.shape[-3]
    cols = np.ascontiguousarray(windows).reshape(*windows.shape[:-2], c_in * width)
    kmat = np.transpose(kernel.data, (1, 0, 2)).reshape(c_in * width, c_out)
    out = cols @ kmat
    if bias is not None:
        out = out + bias.data

    def back(g):
        flat_g = g.reshape(-1, c_out)
        gk = (cols.reshape(-1, c_in * width).T @ flat_g).reshape(c_in, width, c_out)
        gk = np.transpose(gk, (1, 0, 2))
        gcols = (g @ kmat.T).reshape(*g.shape[:-1], c_in, width)
        gxp = np.zeros_like(xp)
        span = stride * (out_len - 1) + 1
        for j in range(width):
            gxp[..., j:j + span:stride, :] += gcols[..., j]
        gx = gxp[..., left:left + length, :]
        grads = [gx, gk]
        if bias is not None:
            grads.append(flat_g.sum(axis=0))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result("conv1d", out, inputs, back)


def pool1d(x: Tensor, window: int, stride: int, mode: str = "max", mask=None) -> Tensor:
    """Pool over time. ``x``: (..., T, C); output has ceil(T/stride) steps.

    ``mask`` (..., T) marks valid positions. Invalid and right-padded
    positions never contribute; a window with no valid position yields 0.
    """
    if window < 1 or stride < 1:
        raise DimensionError(f"pool1d: window and stride must be >= 1, got {window}, {stride}")
    if mode not in ("max", "mean"):
        raise UsageError(f"pool1d: unknown mode {mode!r}")
    length = x.shape[-2]
    out_len = -(-length // stride)
    need = (out_len - 1) * stride + window
    extra = need - length
    valid = np.ones(x.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    valid = np.broadcast_to(valid, x.shape[:-1])
    vpad = np.pad(valid, [(0, 0)] * (valid.ndim - 1) + [(0, extra)])
    xpad = np.pad(x.data, [(0, 0)] * (x.ndim - 2) + [(0, extra), (0, 0)])
    vwin = sliding_window_view(vpad, window, axis=-1)[..., ::stride, :]  # (..., T', w)
    xwin = sliding_window_view(xpad, window, axis=-2)[..., ::stride, :, :]  # (..., T', C, w)
    vmask = vwin[..., None, :]
    count = vwin.sum(axis=-1)[..., None]  # (..., T', 1)
    if mode == "max":
        masked = np.where(vmask, xwin, -np.inf)
        arg = masked.argmax(axis=-1)  # (..., T', C)
        best = np.take_along_axis(masked, arg[..., None], axis=-1)[..., 0]
        out = np.where(count > 0, best, 0.0).astype(x.dtype)
    else:
        total = np.where(vmask, xwin, 0.0).sum(axis=-1)
        out = (total / np.maximum(count, 1)).astype(x.dtype)

    def back(g):
        gpad = np.zeros_like(xpad)
        span = stride * (out_len - 1) + 1
        has = count > 0
        for j in range(window):
            if mode == "max":
                contrib = g * ((arg == j) & has)
            else:
                contrib = g * vwin[..., j][..., None] / np.maximum(count, 1)
            gpad[..., j:j + span:stride, :] += contrib
        return (gpad[..., :length, :],)

    return make_result(f"pool1d_{mode}", out, (x,), back)


# -- composites -------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def attention(q: Tensor, k: Tensor, v: Tensor, bias=None, dropout_p: float = 0.0) -> Tensor:
    """Scaled dot-product attention with an additive mask ``bias`` (0 or large negative)."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = mul(matmul(q, swapaxes(k, -1, -2)), scale)
    if bias is not None:
        scores = add(scores, bias)
    weights = dropout(softmax(scores, axis=-1), dropout_p)
    return matmul(weights, v)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor,
              b: Tensor) -> tuple[Tensor, Tensor]:
    """One step of the gated recurrence; gates are packed as [input, forget, cell, output]."""
    gates = add(add(matmul(x, w_ih), matmul(h, w_hh)), b)
    return lstm_gates(gates, c)


def lstm_gates(gates: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    hidden = c.shape[-1]
    i = sigmoid(gates[..., :hidden])
    f = sigmoid(gates[..., hidden:2 * hidden])
    g = tanh(gates[..., 2 * hidden:3 * hidden])
    o = sigmoid(gates[..., 3 * hidden:])
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new
