"""Character-processing front-ends that shrink a character sequence by a factor ``s``.

All downsampling front-ends pad the batch to a multiple of ``s`` first, so
every pooling or strided window is block-aligned: window ``k`` covers
characters ``[k*s, (k+1)*s)``. Decoder-side front-ends are causal across
those blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from charseq.errors import UsageError
from charseq.layers import (
    Embedding,
    EncoderLayer,
    FeedForward,
    Highway,
    LayerNorm,
    Linear,
    Module,
    local_bias,
    padding_bias,
    param,
    sinusoidal_positions,
    xavier,
)
from charseq.tensor import Tensor, ops
from charseq.text import PAD

VARIANTS = ("direct", "lee", "canine", "gbst")
DEFAULT_LEE_KERNELS = ((1, 128), (3, 256), (5, 512), (7, 512), (9, 256))


@dataclass
class FrontendConfig:
    variant: str = "direct"
    downsample: int = 1
    char_embed_dim: int = 64
    lee_kernels: tuple[tuple[int, int], ...] = DEFAULT_LEE_KERNELS
    canine_span: int | None = None
    highway_layers: int = 2
    lee_ffn_layers: int = 2
    lee_ffn_residual: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise UsageError(f"unknown front-end {self.variant!r}; choose from {VARIANTS}")
        if self.downsample < 1:
            raise UsageError(f"downsampling factor must be >= 1, got {self.downsample}")
        if self.variant == "direct" and self.downsample != 1:
            raise UsageError("the direct front-end cannot downsample (s must be 1)")
        if self.canine_span is not None and self.canine_span < 1:
            raise UsageError(f"CANINE span must be >= 1, got {self.canine_span}")
        self.lee_kernels = tuple((int(w), int(f)) for w, f in self.lee_kernels)

    @property
    def gbst_max_n(self) -> int:
        return self.downsample

    def span_for(self, decoder: bool) -> int:
        if self.canine_span is not None:
            return self.canine_span
        return self.downsample if decoder else 4 * self.downsample


@dataclass
class FrontendOutput:
    states: Tensor
    mask: np.ndarray
    source_length: np.ndarray = field(default=None)

    @property
    def length(self) -> int:
        return self.states.shape[1]


def pad_block(ids: np.ndarray, s: int, value: int = PAD) -> np.ndarray:
    """Right-pad the time axis of a (B, T) id array to a multiple of ``s``."""
    extra = (-ids.shape[1]) % s
    if extra == 0:
        return ids
    return np.pad(ids, [(0, 0), (0, extra)], constant_values=value)


def block_mask(mask: np.ndarray, s: int) -> np.ndarray:
    """A block is valid when any of its ``s`` characters is."""
    b, t = mask.shape
    return mask.reshape(b, t // s, s).any(axis=-1)


def _check_ids(ids, vocab_size: int) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise UsageError(f"front-end expects a (batch, length) id array, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise UsageError(f"character id out of range [0, {vocab_size})")
    return ids


class Frontend(Module):
    variant = "base"

    def __init__(self, cfg: FrontendConfig, vocab_size: int, model_dim: int, decoder: bool, dtype):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.model_dim = model_dim
        self.decoder = decoder
        self.dtype = dtype

    @property
    def downsample(self) -> int:
        return self.cfg.downsample

    def _add_positions(self, x: Tensor) -> Tensor:
        return ops.add(x, sinusoidal_positions(x.shape[1], self.model_dim, x.dtype))

    def _prepare(self, ids) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        ids = _check_ids(ids, self.vocab_size)
        lengths = (ids != PAD).sum(axis=1)
        ids = pad_block(ids, self.downsample)
        return ids, ids != PAD, lengths

    def _embed_masked(self, table: Embedding, ids, mask) -> Tensor:
        return ops.mul(table(ids), mask[..., None].astype(self.dtype))

    def __call__(self, ids, add_positions: bool = True) -> FrontendOutput:
        raise NotImplementedError


class DirectFrontend(Frontend):
    """Embedding lookup scaled by sqrt(d) plus sinusoidal positions."""

    variant = "direct"

    def __init__(self, cfg, vocab_size, model_dim, rng, decoder=False, dtype=np.float32):
        super().__init__(cfg, vocab_size, model_dim, decoder, dtype)
        self.embed = Embedding(vocab_size, model_dim, rng, dtype)

    def __call__(self, ids, add_positions: bool = True) -> FrontendOutput:
        ids, mask, lengths = self._prepare(ids)
        x = ops.mul(self._embed_masked(self.embed, ids, mask), math.sqrt(self.model_dim))
        if add_positions:
            x = self._add_positions(x)
        return FrontendOutput(x, mask, lengths)


class LeeFrontend(Frontend):
    """Parallel convolutions -> max-pool -> projection -> highway -> feed-forward."""

    variant = "lee"

    def __init__(self, cfg, vocab_size, model_dim, rng, decoder=False, dtype=np.float32, ffn_dim=None):
        super().__init__(cfg, vocab_size, model_dim, decoder, dtype)
        c = cfg.char_embed_dim
        self.embed = Embedding(vocab_size, c, rng, dtype)
        self.kernels = [param(xavier(rng, w * c, f, (w, c, f)), dtype) for w, f in cfg.lee_kernels]
        self.kernel_bias = [param(np.zeros(f), dtype) for _, f in cfg.lee_kernels]
        channels = sum(f for _, f in cfg.lee_kernels)
        self.project = Linear(channels, model_dim, rng, dtype)
        self.highways = [Highway(model_dim, rng, dtype) for _ in range(cfg.highway_layers)]
        ffn_dim = ffn_dim or 4 * model_dim
        self.ffn_norms = [LayerNorm(model_dim, dtype) for _ in range(cfg.lee_ffn_layers)]
        self.ffns = [FeedForward(model_dim, ffn_dim, rng, dtype) for _ in range(cfg.lee_ffn_layers)]

    def convolve(self, ids, mask) -> Tensor:
        x = self._embed_masked(self.embed, ids, mask)
        padding = "causal" if self.decoder else "same"
        feats = [ops.relu(ops.conv1d(x, k, b, 1, padding)) for k, b in zip(self.kernels, self.kernel_bias)]
        return feats[0] if len(feats) == 1 else ops.concat(feats, axis=-1)

    def pooled(self, ids) -> tuple[Tensor, np.ndarray, np.ndarray]:
        ids, mask, lengths = self._prepare(ids)
        s = self.downsample
        h = ops.pool1d(self.convolve(ids, mask), s, s, "max", mask)
        return h, mask, lengths

    def __call__(self, ids, add_positions: bool = True) -> FrontendOutput:
        h, mask, lengths = self.pooled(ids)
        h = self.project(h)
        for hw in self.highways:
            h = hw(h)
        for norm, ffn in zip(self.ffn_norms, self.ffns):
            if self.cfg.lee_ffn_residual:
                h = ops.add(h, ffn(norm(h)))
            else:
                h = ffn(norm(h))
        if add_positions:
            h = self._add_positions(h)
        return FrontendOutput(h, block_mask(mask, self.downsample), lengths)


class CanineFrontend(Frontend):
    """Local self-attention layer followed by a strided convolution."""

    variant = "canine"

    def __init__(self, cfg, vocab_size, model_dim, rng, decoder=False, dtype=np.float32,
                 heads: int = 8, ffn_dim=None, dropout: float = 0.0):
        super().__init__(cfg, vocab_size, model_dim, decoder, dtype)
        s = cfg.downsample
        self.span = cfg.span_for(decoder)
        self.embed = Embedding(vocab_size, model_dim, rng, dtype)
        self.local = EncoderLayer(model_dim, ffn_dim or 4 * model_dim, heads, rng, dtype, dropout)
        self.down = param(xavier(rng, s * model_dim, model_dim, (s, model_dim, model_dim)), dtype)
        self.down_bias = param(np.zeros(model_dim), dtype)

    def local_states(self, ids) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Character states after local attention, before downsampling."""
        ids, mask, lengths = self._prepare(ids)
        x = self._embed_masked(self.embed, ids, mask)
        bias = local_bias(ids.shape[1], self.span, causal=self.decoder, dtype=self.dtype)
        bias = bias + padding_bias(mask, self.dtype)
        return self.local(x, bias), mask, lengths

    def __call__(self, ids, add_positions: bool = True) -> FrontendOutput:
        h, mask, lengths = self.local_states(ids)
        h = ops.mul(h, mask[..., None].astype(self.dtype))
        s = self.downsample
        h = ops.conv1d(h, self.down, self.down_bias, stride=s, padding="same")
        if add_positions:
            h = self._add_positions(h)
        return FrontendOutput(h, block_mask(mask, s), lengths)


def block_average_matrix(mask: np.ndarray, n: int, dtype=np.float32) -> np.ndarray:
    """(B, T, T) operator replacing each position by the mean of its n-block.

    Blocks are ``[0, n), [n, 2n), ...``; invalid positions are excluded from
    the means and receive the mean of their block as well.
    """
    b, t = mask.shape
    block = np.arange(t) // n
    same = block[:, None] == block[None, :]
    weights = same[None] & mask[:, None, :]
    counts = weights.sum(axis=-1, keepdims=True)
    return (weights / np.maximum(counts, 1)).astype(dtype)


class GbstFrontend(Frontend):
    """Soft selection over block-averaged n-gram representations, then mean pooling."""

    variant = "gbst"

    def __init__(self, cfg, vocab_size, model_dim, rng, decoder=False, dtype=np.float32):
        if decoder:
            raise UsageError("the GBST front-end is encoder-only; use Lee-style encoding on the decoder")
        super().__init__(cfg, vocab_size, model_dim, decoder, dtype)
        n = cfg.gbst_max_n
        self.embed = Embedding(vocab_size, model_dim, rng, dtype)
        self.conv = param(xavier(rng, n * model_dim, model_dim, (n, model_dim, model_dim)), dtype)
        self.conv_bias = param(np.zeros(model_dim), dtype)
        self.score = Linear(model_dim, 1, rng, dtype)

    def block_scores(self, x: Tensor, mask: np.ndarray) -> tuple[Tensor, list[Tensor]]:
        """Softmax weights over n-gram lengths (B, T, N) and the per-n block means."""
        reps = [ops.matmul(block_average_matrix(mask, n, self.dtype), x)
                for n in range(1, self.cfg.gbst_max_n + 1)]
        scores = ops.concat([self.score(r) for r in reps], axis=-1)
        return ops.softmax(scores, axis=-1), reps

    def mix_and_pool(self, x: Tensor, mask: np.ndarray) -> Tensor:
        weights, reps = self.block_scores(x, mask)
        mixed = None
        for i, r in enumerate(reps):
            term = ops.mul(weights[..., i:i + 1], r)
            mixed = term if i == 0 else ops.add(mixed, term)
        n = self.cfg.gbst_max_n
        return ops.pool1d(mixed, n, n, "mean", mask)

    def __call__(self, ids, add_positions: bool = True) -> FrontendOutput:
        ids, mask, lengths = self._prepare(ids)
        x = self._embed_masked(self.embed, ids, mask)
        x = ops.conv1d(x, self.conv, self.conv_bias, 1, "same")
        h = self.mix_and_pool(x, mask)
        if add_positions:
            h = self._add_positions(h)
        return FrontendOutput(h, block_mask(mask, self.downsample), lengths)


def build_frontend(cfg: FrontendConfig, vocab_size: int, model_dim: int, rng, decoder: bool = False,
                   dtype=np.float32, heads: int = 8, ffn_dim: int | None = None,
                   dropout: float = 0.0) -> Frontend:
    if cfg.variant == "direct":
        return DirectFrontend(cfg, vocab_size, model_dim, rng, decoder, dtype)
    if cfg.variant == "lee":
        return LeeFrontend(cfg, vocab_size, model_dim, rng, decoder, dtype, ffn_dim)
    if cfg.variant == "canine":
        return CanineFrontend(cfg, vocab_size, model_dim, rng, decoder, dtype, heads, ffn_dim, dropout)
    return GbstFrontend(cfg, vocab_size, model_dim, rng, decoder, dtype)
