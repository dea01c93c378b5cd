"""Transformer encoder-decoder with character front-ends and the two-step block decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from charseq.errors import DimensionError, UsageError
from charseq.frontends import FrontendConfig, FrontendOutput, build_frontend, pad_block
from charseq.layers import (
    DecoderLayer,
    Embedding,
    EncoderLayer,
    LayerNorm,
    Linear,
    LSTMCell,
    Module,
    causal_bias,
    padding_bias,
)
from charseq.tensor import Tensor, ops
from charseq.text import BOS, EOS, PAD


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    enc_layers: int = 6
    dec_layers: int = 6
    model_dim: int = 512
    ffn_dim: int = 2048
    heads: int = 8
    dropout: float = 0.1
    encoder: FrontendConfig = field(default_factory=FrontendConfig)
    decoder: FrontendConfig = field(default_factory=FrontendConfig)
    two_step: bool = False
    lstm_hidden: int = 128
    lstm_char_dim: int = 64
    share_char_embeddings: bool = True
    reset_lstm_per_block: bool = False
    tie_output: bool = False
    max_positions: int = 512

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = FrontendConfig(**self.encoder)
        if isinstance(self.decoder, dict):
            self.decoder = FrontendConfig(**self.decoder)
        if self.model_dim % self.heads:
            raise UsageError(f"model_dim {self.model_dim} is not divisible by {self.heads} heads")
        if self.decoder.variant == "gbst":
            raise UsageError("GBST cannot run on the decoder side; use 'lee' with a GBST encoder")
        if not self.two_step and self.decoder.variant != "direct":
            raise UsageError("a downsampling decoder front-end requires two_step=True")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        for side in ("encoder", "decoder"):
            if isinstance(data.get(side), dict):
                front = dict(data[side])
                front["lee_kernels"] = tuple(tuple(k) for k in front.get("lee_kernels", ()))
                data[side] = FrontendConfig(**front)
        return cls(**data)


class TwoStepHead(Module):
    """Recurrent cell that expands each Transformer state into ``s`` characters.

    Step ``j`` of block ``i`` reads the previous character's embedding
    concatenated with the ``j``-th projection of decoder state ``h_i``.
    """

    def __init__(self, cfg: ModelConfig, rng, dtype, char_embed: Embedding | None):
        s = cfg.decoder.downsample
        c = cfg.lstm_char_dim
        self.block = s
        self.char_dim = c
        self.embed = char_embed if char_embed is not None else Embedding(cfg.tgt_vocab, c, rng, dtype)
        self.state_proj = Linear(cfg.model_dim, s * c, rng, dtype)
        self.cell = LSTMCell(2 * c, cfg.lstm_hidden, rng, dtype)
        self.output = Linear(cfg.lstm_hidden, cfg.tgt_vocab, rng, dtype, std=0.02)
        self.reset_per_block = cfg.reset_lstm_per_block

    def projections(self, states: Tensor) -> Tensor:
        """(B, n, d) decoder states -> (B, n*s, c) per-character conditioning."""
        b, n, _ = states.shape
        return ops.reshape(self.state_proj(states), (b, n * self.block, self.char_dim))

    def step(self, prev_chars, conditioning: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """One character step; returns (logits, h, c)."""
        x = ops.concat([self.embed(np.asarray(prev_chars)), conditioning], axis=-1)
        h, c = self.cell(x, h, c)
        return self.output(h), h, c


class Seq2SeqModel(Module):
    """Pre-norm Transformer encoder-decoder.

    ``decoder_calls`` counts invocations of the Transformer decoder stack;
    decoding code reads it to verify one call per generated block.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        d = cfg.model_dim
        kw = dict(heads=cfg.heads, ffn_dim=cfg.ffn_dim, dropout=cfg.dropout)
        self.src_frontend = build_frontend(cfg.encoder, cfg.src_vocab, d, rng, False, dtype, **_frontend_kw(cfg.encoder, kw))
        self.encoder_layers = [EncoderLayer(d, cfg.ffn_dim, cfg.heads, rng, dtype, cfg.dropout)
                               for _ in range(cfg.enc_layers)]
        self.encoder_norm = LayerNorm(d, dtype)
        self.tgt_frontend = build_frontend(cfg.decoder, cfg.tgt_vocab, d, rng, True, dtype, **_frontend_kw(cfg.decoder, kw))
        self.decoder_layers = [DecoderLayer(d, cfg.ffn_dim, cfg.heads, rng, dtype, cfg.dropout)
                               for _ in range(cfg.dec_layers)]
        self.decoder_norm = LayerNorm(d, dtype)
        if cfg.two_step:
            shared = None
            if cfg.share_char_embeddings and self.tgt_frontend.embed.weight.shape[1] == cfg.lstm_char_dim:
                shared = self.tgt_frontend.embed
            self.head = TwoStepHead(cfg, rng, dtype, shared)
            self.output = None
        else:
            self.head = None
            self.output = None if cfg.tie_output else Linear(d, cfg.tgt_vocab, rng, dtype, std=0.02)
        self.decoder_calls = 0

    @property
    def block(self) -> int:
        return self.cfg.decoder.downsample if self.cfg.two_step else 1

    # -- encoder ------------------------------------------------------------

    def encode(self, src_ids) -> tuple[Tensor, np.ndarray]:
        src_ids = np.asarray(src_ids)
        if src_ids.ndim == 1:
            src_ids = src_ids[None]
        if src_ids.shape[1] == 0:
            raise UsageError("cannot encode an empty source")
        limit = self.cfg.max_positions * self.cfg.encoder.downsample
        if src_ids.shape[1] > limit:
            raise UsageError(f"source length {src_ids.shape[1]} exceeds the limit of {limit} characters")
        front = self.src_frontend(src_ids)
        x = front.states
        bias = padding_bias(front.mask, self.dtype)
        for layer in self.encoder_layers:
            x = layer(x, bias)
        return self.encoder_norm(x), front.mask

    # -- Transformer decoder stack -------------------------------------------

    def decoder_states(self, memory: Tensor, memory_mask: np.ndarray, front: FrontendOutput) -> Tensor:
        self.decoder_calls += 1
        x = front.states
        t = x.shape[1]
        self_bias = causal_bias(t, self.dtype) + padding_bias(front.mask, self.dtype)
        mem_bias = padding_bias(memory_mask, self.dtype)
        for layer in self.decoder_layers:
            x = layer(x, memory, self_bias, mem_bias)
        return self.decoder_norm(x)

    def _project(self, x: Tensor) -> Tensor:
        if self.output is not None:
            return self.output(x)
        return ops.matmul(x, ops.transpose(self.tgt_frontend.embed.weight, (1, 0)))

    def decode_forward(self, memory: Tensor, memory_mask: np.ndarray, tgt_in) -> Tensor:
        """Teacher-forced logits (B, T, V) for a BOS-prefixed target on the standard path."""
        if self.cfg.two_step:
            raise UsageError("decode_forward is the standard path; use two_step_forward for block decoding")
        tgt_in = np.asarray(tgt_in)
        if tgt_in.ndim == 1:
            tgt_in = tgt_in[None]
        if not (tgt_in[:, 0] == BOS).all():
            raise UsageError("decoder input must begin with BOS")
        front = self.tgt_frontend(tgt_in)
        return self._project(self.decoder_states(memory, memory_mask, front))

    # -- two-step decoding ----------------------------------------------------

    def block_inputs(self, tgt_out: np.ndarray) -> np.ndarray:
        """Decoder front-end input: a [BOS, PAD, ...] block followed by all but the last target block."""
        s = self.block
        first = np.full((tgt_out.shape[0], s), PAD, dtype=tgt_out.dtype)
        first[:, 0] = BOS
        return np.concatenate([first, tgt_out[:, :-s]], axis=1)

    def two_step_forward(self, memory: Tensor, memory_mask: np.ndarray, tgt_out) -> Tensor:
        """Teacher-forced logits (B, T, V); ``tgt_out`` holds target characters plus EOS, block-padded."""
        if not self.cfg.two_step:
            raise UsageError("model was built without the two-step decoder")
        tgt_out = np.asarray(tgt_out)
        if tgt_out.ndim == 1:
            tgt_out = tgt_out[None]
        s = self.block
        if tgt_out.shape[1] % s:
            raise DimensionError(f"target length {tgt_out.shape[1]} is not a multiple of the block size {s}; "
                                 "pad it with pad_block first")
        front = self.tgt_frontend(self.block_inputs(tgt_out))
        states = self.decoder_states(memory, memory_mask, front)
        cond = self.head.projections(states)
        prev = np.concatenate([np.full((tgt_out.shape[0], 1), BOS, dtype=tgt_out.dtype), tgt_out[:, :-1]], axis=1)
        batch, length = tgt_out.shape
        emb = self.head.embed(prev)
        x = ops.concat([emb, cond], axis=-1)
        pre = ops.add(ops.matmul(x, self.head.cell.w_ih), self.head.cell.bias)
        h, c = self.head.cell.zero_state(batch, self.dtype)
        outputs = []
        for t in range(length):
            if self.head.reset_per_block and t and t % s == 0:
                h, c = self.head.cell.zero_state(batch, self.dtype)
            gates = ops.add(pre[:, t], ops.matmul(h, self.head.cell.w_hh))
            h, c = ops.lstm_gates(gates, c)
            outputs.append(h)
        hidden = ops.stack(outputs, axis=1)
        return self.head.output(hidden)

    # -- batching helpers -------------------------------------------------------

    def make_batch(self, sources: list[list[int]], targets: list[list[int]]):
        """Pad id lists into (src, decoder-input-or-None, target-output) arrays."""
        src = _pad([list(s) for s in sources])
        if self.cfg.two_step:
            out = pad_block(_pad([list(t) + [EOS] for t in targets]), self.block)
            return src, None, out
        tgt_in = _pad([[BOS] + list(t) for t in targets])
        tgt_out = _pad([list(t) + [EOS] for t in targets])
        return src, tgt_in, tgt_out

    def logits(self, src: np.ndarray, tgt_in, tgt_out: np.ndarray) -> Tensor:
        memory, mask = self.encode(src)
        if self.cfg.two_step:
            return self.two_step_forward(memory, mask, tgt_out)
        return self.decode_forward(memory, mask, tgt_in)


def _frontend_kw(cfg: FrontendConfig, kw: dict) -> dict:
    if cfg.variant == "canine":
        return kw
    if cfg.variant == "lee":
        return {"ffn_dim": kw["ffn_dim"]}
    return {}


def _pad(seqs: list[list[int]], value: int = PAD) -> np.ndarray:
    width = max((len(s) for s in seqs), default=0)
    out = np.full((len(seqs), max(width, 1)), value, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def count_frontend_parameters(cfg: FrontendConfig, vocab_size: int, model_dim: int = 512,
                              ffn_dim: int = 2048, heads: int = 8) -> int:
    """Parameter count of one encoder-side front-end, embeddings included."""
    rng = np.random.default_rng(0)
    front = build_frontend(cfg, vocab_size, model_dim, rng, False, np.float32,
                           **_frontend_kw(cfg, {"heads": heads, "ffn_dim": ffn_dim, "dropout": 0.0}))
    return front.num_parameters()

