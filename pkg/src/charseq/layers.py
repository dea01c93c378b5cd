"""Parameter containers and the Transformer building blocks."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from charseq.tensor import Tensor
from charseq.tensor import ops

NEG_INF = -1e9


class Module:
    """Owns parameters (trainable :class:`Tensor` attributes) and sub-modules."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        found: dict[str, Tensor] = {}
        seen: set[int] = set()
        self._collect(prefix, found, seen)
        return found

    def _collect(self, prefix: str, found: dict, seen: set) -> None:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad and id(value) not in seen:
                    seen.add(id(value))
                    found[path] = value
            elif isinstance(value, Module):
                value._collect(path + ".", found, seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        item._collect(f"{path}.{i}.", found, seen)
                    elif isinstance(item, Tensor) and item.requires_grad and id(item) not in seen:
                        seen.add(id(item))
                        found[f"{path}.{i}"] = item

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def param(array: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(array, dtype=dtype), requires_grad=True)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, dtype=np.float32, bias: bool = True, std: float | None = None):
        w = xavier(rng, d_in, d_out) if std is None else rng.normal(0.0, std, size=(d_in, d_out))
        self.weight = param(w, dtype)
        self.bias = param(np.zeros(d_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng, dtype=np.float32):
        self.weight = param(rng.normal(0.0, dim ** -0.5, size=(vocab, dim)), dtype)

    def __call__(self, ids) -> Tensor:
        return ops.embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = param(np.ones(dim), dtype)
        self.beta = param(np.zeros(dim), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng, dtype=np.float32, dropout: float = 0.0):
        self.inner = Linear(dim, hidden, rng, dtype)
        self.outer = Linear(hidden, dim, rng, dtype)
        self.dropout = dropout

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(ops.dropout(ops.relu(self.inner(x)), self.dropout))


class Highway(Module):
    """``t * relu(W x) + (1 - t) * x`` with gate ``t = sigmoid(W_t x)``."""

    def __init__(self, dim: int, rng, dtype=np.float32):
        self.transform = Linear(dim, dim, rng, dtype)
        self.gate = Linear(dim, dim, rng, dtype)
        self.gate.bias.data[:] = -1.0

    def __call__(self, x: Tensor) -> Tensor:
        t = ops.sigmoid(self.gate(x))
        h = ops.relu(self.transform(x))
        return ops.add(ops.mul(t, h), ops.mul(ops.sub(1.0, t), x))


class LSTMCell(Module):
    def __init__(self, d_in: int, hidden: int, rng, dtype=np.float32):
        self.w_ih = param(xavier(rng, d_in, 4 * hidden), dtype)
        self.w_hh = param(xavier(rng, hidden, 4 * hidden), dtype)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.bias = param(b, dtype)
        self.hidden = hidden

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        return ops.lstm_cell(x, h, c, self.w_ih, self.w_hh, self.bias)

    def zero_state(self, batch: int, dtype) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.hidden), dtype=dtype)
        return Tensor(z), Tensor(z.copy())


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng, dtype=np.float32, dropout: float = 0.0):
        self.query = Linear(dim, dim, rng, dtype)
        self.key_value = Linear(dim, 2 * dim, rng, dtype)
        self.output = Linear(dim, dim, rng, dtype)
        self.heads = heads
        self.dropout = dropout

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return ops.transpose(ops.reshape(x, (b, t, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, memory: Tensor, bias=None) -> Tensor:
        b, t, d = x.shape
        q = self._split(self.query(x))
        kv = self.key_value(memory)
        k = self._split(kv[..., :d])
        v = self._split(kv[..., d:])
        ctx = ops.attention(q, k, v, bias, self.dropout)
        ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return self.output(ctx)


class EncoderLayer(Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, dim: int, ffn: int, heads: int, rng, dtype=np.float32, dropout: float = 0.0):
        self.attn_norm = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype, dropout)
        self.ffn_norm = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, ffn, rng, dtype, dropout)
        self.dropout = dropout

    def __call__(self, x: Tensor, bias=None) -> Tensor:
        h = self.attn_norm(x)
        x = ops.add(x, ops.dropout(self.attn(h, h, bias), self.dropout))
        return ops.add(x, ops.dropout(self.ffn(self.ffn_norm(x)), self.dropout))


class DecoderLayer(Module):
    def __init__(self, dim: int, ffn: int, heads: int, rng, dtype=np.float32, dropout: float = 0.0):
        self.self_norm = LayerNorm(dim, dtype)
        self.self_attn = MultiHeadAttention(dim, heads, rng, dtype, dropout)
        self.cross_norm = LayerNorm(dim, dtype)
        self.cross_attn = MultiHeadAttention(dim, heads, rng, dtype, dropout)
        self.ffn_norm = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, ffn, rng, dtype, dropout)
        self.dropout = dropout

    def __call__(self, x: Tensor, memory: Tensor, self_bias, memory_bias) -> Tensor:
        h = self.self_norm(x)
        x = ops.add(x, ops.dropout(self.self_attn(h, h, self_bias), self.dropout))
        x = ops.add(x, ops.dropout(self.cross_attn(self.cross_norm(x), memory, memory_bias), self.dropout))
        return ops.add(x, ops.dropout(self.ffn(self.ffn_norm(x)), self.dropout))


@lru_cache(maxsize=64)
def _positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: dim // 2])
    table.setflags(write=False)
    return table


def sinusoidal_positions(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    return _positions(length, dim).astype(dtype)


def padding_bias(mask: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(B, T) validity mask -> additive (B, 1, 1, T) attention bias."""
    return np.where(mask, 0.0, NEG_INF).astype(dtype)[:, None, None, :]


def causal_bias(length: int, dtype=np.float32) -> np.ndarray:
    allowed = np.tril(np.ones((length, length), dtype=bool))
    return np.where(allowed, 0.0, NEG_INF).astype(dtype)[None, None]


def local_bias(length: int, span: int, causal: bool = False, dtype=np.float32) -> np.ndarray:
    """Attention window of ``span`` positions: radius ``span // 2`` around the
    query, or the ``span`` most recent positions when ``causal``."""
    offset = np.arange(length)[:, None] - np.arange(length)[None, :]
    if causal:
        allowed = (offset >= 0) & (offset < span)
    else:
        allowed = np.abs(offset) <= span // 2
    return np.where(allowed, 0.0, NEG_INF).astype(dtype)[None, None]
