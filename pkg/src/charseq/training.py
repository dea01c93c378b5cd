"""Loss, learning-rate schedule, Adam and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from charseq.errors import NumericError, TrainingDiverged, UsageError
from charseq.model import Seq2SeqModel
from charseq.tensor import Tape, Tensor, backward, no_grad, ops
from charseq.text import PAD

logger = logging.getLogger(__name__)

Pair = tuple[Sequence[int], Sequence[int]]


@dataclass
class TrainConfig:
    peak_lr: float = 5e-4
    warmup: int = 4000
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-9
    label_smoothing: float = 0.1
    batch_tokens: int = 20000
    accumulation: int = 3
    clip_norm: float | None = None
    max_steps: int = 1000
    max_seconds: float | None = None
    seed: int = 0
    valid_every: int = 0
    checkpoint_every: int = 0
    keep_best: int = 5
    average_best: bool = False
    patience: int | None = None

    def __post_init__(self):
        if self.warmup < 1:
            raise UsageError(f"warmup must be >= 1, got {self.warmup}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise UsageError(f"label smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.accumulation < 1:
            raise UsageError(f"accumulation must be >= 1, got {self.accumulation}")
        self.betas = tuple(float(b) for b in self.betas)

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        """``"base"`` is the small-data recipe; ``"wmt"`` switches to beta2=0.998 and norm-5 clipping."""
        presets = {
            "base": {},
            "wmt": {"betas": (0.9, 0.998), "clip_norm": 5.0, "warmup": 16000},
        }
        if name not in presets:
            raise UsageError(f"unknown training preset {name!r}")
        return cls(**{**presets[name], **overrides})


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` followed by inverse square-root decay."""
    if step < 1:
        raise UsageError(f"learning-rate step must be >= 1, got {step}")
    return cfg.peak_lr * min(step / cfg.warmup, math.sqrt(cfg.warmup / step))


def label_smoothed_nll(logits: Tensor, targets, smoothing: float, pad_mask=None,
                       reduction: str = "mean") -> Tensor:
    """(1 - eps) * NLL + eps * mean_v(-log p_v), over non-PAD positions.

    ``pad_mask`` marks positions that count (defaults to ``targets != PAD``).
    ``reduction="sum"`` returns the token sum for callers that normalise
    across several micro-batches.
    """
    if not 0.0 <= smoothing < 1.0:
        raise UsageError(f"smoothing must be in [0, 1), got {smoothing}")
    targets = np.asarray(targets)
    valid = (targets != PAD) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        raise UsageError("label_smoothed_nll: every target position is padding")
    logp = ops.log_softmax(logits, axis=-1)
    nll = ops.neg(ops.gather_last(logp, targets))
    per_token = nll
    if smoothing > 0:
        uniform = ops.neg(ops.mean(logp, axis=-1))
        per_token = ops.add(ops.mul(nll, 1.0 - smoothing), ops.mul(uniform, smoothing))
    total = ops.sum(ops.mul(per_token, valid.astype(logits.dtype)))
    return total if reduction == "sum" else ops.div(total, float(count))


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params.values() if p.grad is not None))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class Adam:
    """Adam with bias correction; moments are keyed by parameter name."""

    def __init__(self, betas=(0.9, 0.98), eps: float = 1e-9):
        self.betas = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        for name, p in params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise TrainingDiverged(f"non-finite gradient in parameter {name!r}")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def adam_step(params: dict[str, Tensor], optimizer: Adam, lr: float, clip_norm: float | None = None) -> float:
    """Clip (optionally) then apply one Adam update; returns the pre-clip gradient norm."""
    norm = clip_grad_norm(params, clip_norm) if clip_norm else float("nan")
    optimizer.step(params, lr)
    return norm


# -- batching ------------------------------------------------------------------

def token_batches(pairs: Sequence[Pair], max_tokens: int, rng: np.random.Generator) -> list[list[int]]:
    """Length-sorted batches whose padded size stays under ``max_tokens``, in shuffled order."""
    lengths = np.array([max(len(s), len(t)) + 1 for s, t in pairs])
    order = np.lexsort((rng.random(len(pairs)), lengths))
    batches, current, longest = [], [], 0
    for i in order:
        longest_next = max(longest, lengths[i])
        if current and longest_next * (len(current) + 1) > max_tokens:
            batches.append(current)
            current, longest_next = [], lengths[i]
        current.append(int(i))
        longest = longest_next
    if current:
        batches.append(current)
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    position: int = 0
    best_valid: float = float("inf")
    stale: int = 0
    rng_state: dict = field(default_factory=dict)
    optimizer: Adam = field(default_factory=Adam)

    def metadata(self) -> dict:
        data = asdict(self)
        data.pop("optimizer")
        data["adam_t"] = self.optimizer.t
        return data


@dataclass
class MetricsRow:
    step: int
    lr: float
    train_loss: float
    valid_loss: float | None = None

    def tsv(self) -> str:
        valid = "" if self.valid_loss is None else f"{self.valid_loss:.6f}"
        return f"{self.step}\t{self.lr:.8g}\t{self.train_loss:.6f}\t{valid}"


METRICS_HEADER = "step\tlr\ttrain_loss\tvalid_loss"


class MetricsLog:
    """Append-only TSV log of training progress."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            self.path.write_text(METRICS_HEADER + "\n", encoding="utf-8")

    def __call__(self, row: MetricsRow) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(row.tsv() + "\n")


def average_parameters(snapshots: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    if not snapshots:
        raise UsageError("nothing to average")
    out = {}
    for name in snapshots[0]:
        stacked = np.stack([s[name].astype(np.float64) for s in snapshots])
        out[name] = stacked.mean(axis=0).astype(snapshots[0][name].dtype)
    return out


def snapshot(model: Seq2SeqModel) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.named_parameters().items()}


def restore(model: Seq2SeqModel, params: dict[str, np.ndarray]) -> None:
    for name, tensor in model.named_parameters().items():
        tensor.data[...] = params[name]


def batch_loss(model: Seq2SeqModel, pairs: Sequence[Pair], smoothing: float,
               reduction: str = "mean") -> tuple[Tensor, int]:
    src, tgt_in, tgt_out = model.make_batch([p[0] for p in pairs], [p[1] for p in pairs])
    logits = model.logits(src, tgt_in, tgt_out)
    return label_smoothed_nll(logits, tgt_out, smoothing, reduction=reduction), int((tgt_out != PAD).sum())


def evaluate_loss(model: Seq2SeqModel, pairs: Sequence[Pair], max_tokens: int = 4000) -> float:
    """Per-token NLL (no smoothing) in eval mode."""
    total, count = 0.0, 0
    with no_grad():
        for batch in token_batches(pairs, max_tokens, np.random.default_rng(0)):
            loss, n = batch_loss(model, [pairs[i] for i in batch], 0.0, reduction="sum")
            total += loss.item()
            count += n
    return total / max(count, 1)


class Trainer:
    """Drives optimisation; all state needed for an exact resume lives in ``state``."""

    def __init__(self, model: Seq2SeqModel, pairs: Sequence[Pair], cfg: TrainConfig,
                 valid: Sequence[Pair] | None = None, state: TrainState | None = None,
                 log: Callable[[MetricsRow], None] | None = None,
                 on_checkpoint: Callable[[Seq2SeqModel, TrainState], None] | None = None):
        if not pairs:
            raise UsageError("training corpus is empty")
        self.model = model
        self.pairs = list(pairs)
        self.cfg = cfg
        self.valid = list(valid) if valid else None
        self.state = state or TrainState(optimizer=Adam(cfg.betas, cfg.eps))
        if not self.state.rng_state:
            self.state.rng_state = np.random.default_rng(cfg.seed).bit_generator.state
        self.log = log
        self.on_checkpoint = on_checkpoint
        self.history: list[MetricsRow] = []
        self.best: list[tuple[float, int, dict[str, np.ndarray]]] = []
        self._epoch_batches: tuple[int, list[list[int]]] | None = None

    def _batches_for(self, epoch: int) -> list[list[int]]:
        if self._epoch_batches is None or self._epoch_batches[0] != epoch:
            rng = np.random.default_rng([self.cfg.seed, epoch])
            self._epoch_batches = (epoch, token_batches(self.pairs, self.cfg.batch_tokens, rng))
        return self._epoch_batches[1]

    def _next_batch(self) -> list[int]:
        batches = self._batches_for(self.state.epoch)
        if self.state.position >= len(batches):
            self.state.epoch += 1
            self.state.position = 0
            batches = self._batches_for(self.state.epoch)
        batch = batches[self.state.position]
        self.state.position += 1
        return batch

    def train_step(self) -> float:
        """One optimizer update over ``accumulation`` micro-batches."""
        params = self.model.named_parameters()
        group = [[self.pairs[i] for i in self._next_batch()] for _ in range(self.cfg.accumulation)]
        total_tokens = sum(sum(len(t) + 1 for _, t in mb) for mb in group)
        rng = np.random.default_rng()
        rng.bit_generator.state = self.state.rng_state
        self.model.zero_grad()
        loss_value = 0.0
        try:
            for micro in group:
                with Tape(training=True, rng=rng):
                    loss_sum, _ = batch_loss(self.model, micro, self.cfg.label_smoothing, reduction="sum")
                    loss = ops.div(loss_sum, float(total_tokens))
                    backward(loss)
                loss_value += loss.item()
        except NumericError as exc:
            raise TrainingDiverged(f"step {self.state.step + 1}: {exc}") from exc
        if not math.isfinite(loss_value):
            raise TrainingDiverged(f"step {self.state.step + 1}: loss is {loss_value}")
        lr = lr_at(self.state.step + 1, self.cfg)
        adam_step(params, self.state.optimizer, lr, self.cfg.clip_norm)
        self.model.zero_grad()
        self.state.rng_state = rng.bit_generator.state
        self.state.step += 1
        self._last_lr = lr
        return loss_value

    def _validate(self) -> float:
        loss = evaluate_loss(self.model, self.valid)
        self.best.append((loss, self.state.step, snapshot(self.model)))
        self.best.sort(key=lambda item: (item[0], -item[1]))
        del self.best[self.cfg.keep_best:]
        if loss < self.state.best_valid:
            self.state.best_valid = loss
            self.state.stale = 0
        else:
            self.state.stale += 1
        return loss

    def run(self) -> TrainState:
        start = time.monotonic()
        while self.state.step < self.cfg.max_steps:
            if self.cfg.max_seconds is not None and time.monotonic() - start > self.cfg.max_seconds:
                logger.info("time budget exhausted at step %d", self.state.step)
                break
            train_loss = self.train_step()
            valid_loss = None
            if self.valid and self.cfg.valid_every and self.state.step % self.cfg.valid_every == 0:
                valid_loss = self._validate()
            row = MetricsRow(self.state.step, self._last_lr, train_loss, valid_loss)
            self.history.append(row)
            if self.log is not None:
                self.log(row)
            if self.on_checkpoint and self.cfg.checkpoint_every and self.state.step % self.cfg.checkpoint_every == 0:
                self.on_checkpoint(self.model, self.state)
            if self.cfg.patience is not None and self.state.stale >= self.cfg.patience:
                logger.info("early stopping at step %d", self.state.step)
                break
        if self.cfg.average_best and self.best:
            restore(self.model, average_parameters([snap for _, _, snap in self.best]))
        return self.state


def train(model: Seq2SeqModel, pairs: Sequence[Pair], cfg: TrainConfig, valid: Sequence[Pair] | None = None,
          **kwargs) -> tuple[TrainState, list[MetricsRow]]:
    trainer = Trainer(model, pairs, cfg, valid, **kwargs)
    state = trainer.run()
    return state, trainer.history
