"""scikit-learn style wrappers: tokenizers as transformers and a fit/predict translator."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from charseq.checkpoint import load_checkpoint, save_checkpoint
from charseq.decoding import DecodeConfig, search_model, translate
from charseq.errors import UsageError
from charseq.frontends import FrontendConfig
from charseq.metrics import corpus_chrf
from charseq.model import ModelConfig, Seq2SeqModel
from charseq.text import build_char_vocab, learn_bpe
from charseq.training import Trainer, TrainConfig


def check_texts(X, name: str = "X", allow_empty_items: bool = False) -> list[str]:
    """Validate a 1-D collection of strings and return it as a list."""
    if isinstance(X, str):
        raise UsageError(f"{name} must be a sequence of strings, not a single string")
    if isinstance(X, np.ndarray):
        if X.ndim != 1:
            raise UsageError(f"{name} must be 1-D, got shape {X.shape}")
        X = X.tolist()
    try:
        items = list(X)
    except TypeError:
        raise UsageError(f"{name} must be a sequence of strings, got {type(X).__name__}") from None
    if not items:
        raise UsageError(f"{name} is empty")
    for i, item in enumerate(items):
        if not isinstance(item, str):
            raise UsageError(f"{name}[{i}] is {type(item).__name__}, expected str")
        if not allow_empty_items and not item.strip():
            raise UsageError(f"{name}[{i}] is empty")
    return items


def check_pair(X, y) -> tuple[list[str], list[str]]:
    xs, ys = check_texts(X, "X"), check_texts(y, "y")
    if len(xs) != len(ys):
        raise UsageError(f"X and y differ in length ({len(xs)}, {len(ys)})")
    return xs, ys


class CharTokenizer(TransformerMixin, BaseEstimator):
    """Character vocabulary capped at ``cap`` symbols (reserved ids included)."""

    def __init__(self, cap: int = 300):
        self.cap = cap

    def fit(self, X, y=None):
        self.vocab_ = build_char_vocab(check_texts(X), cap=self.cap)
        return self

    def transform(self, X) -> list[list[int]]:
        check_is_fitted(self, "vocab_")
        return [self.vocab_.encode(x) for x in check_texts(X, allow_empty_items=True)]

    def inverse_transform(self, ids) -> list[str]:
        check_is_fitted(self, "vocab_")
        return [self.vocab_.decode(row) for row in ids]


class BpeTokenizer(TransformerMixin, BaseEstimator):
    """Byte-pair segmentation learned with ``merges`` merge operations."""

    def __init__(self, merges: int = 16000):
        self.merges = merges

    def fit(self, X, y=None):
        self.model_ = learn_bpe(check_texts(X), merges=self.merges)
        return self

    def transform(self, X) -> list[list[int]]:
        check_is_fitted(self, "model_")
        return [self.model_.encode(x) for x in check_texts(X, allow_empty_items=True)]

    def inverse_transform(self, ids) -> list[str]:
        check_is_fitted(self, "model_")
        return [self.model_.decode(row) for row in ids]


class CharTranslator(BaseEstimator):
    """Character-level encoder-decoder with a scikit-learn interface.

    ``fit(X, y)`` takes parallel lists of source and target strings,
    ``predict(X)`` returns translations and ``score`` is corpus chrF.
    A non-direct ``frontend`` switches on the two-step block decoder.
    """

    def __init__(self, frontend: str = "direct", downsample: int = 1, enc_layers: int = 2, dec_layers: int = 2,
                 model_dim: int = 64, ffn_dim: int = 256, heads: int = 4, dropout: float = 0.0,
                 char_embed_dim: int = 32, lee_kernels=((1, 32), (3, 64), (5, 64)), lstm_hidden: int = 64,
                 lstm_char_dim: int = 32, peak_lr: float = 1e-3, warmup: int = 200, batch_tokens: int = 800,
                 max_steps: int = 1000, max_seconds: float | None = None, label_smoothing: float = 0.1,
                 strategy: str = "greedy", beam: int = 5, alpha: float = 1.0, vocab_cap: int = 300,
                 random_state: int = 0):
        self.frontend = frontend
        self.downsample = downsample
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.model_dim = model_dim
        self.ffn_dim = ffn_dim
        self.heads = heads
        self.dropout = dropout
        self.char_embed_dim = char_embed_dim
        self.lee_kernels = lee_kernels
        self.lstm_hidden = lstm_hidden
        self.lstm_char_dim = lstm_char_dim
        self.peak_lr = peak_lr
        self.warmup = warmup
        self.batch_tokens = batch_tokens
        self.max_steps = max_steps
        self.max_seconds = max_seconds
        self.label_smoothing = label_smoothing
        self.strategy = strategy
        self.beam = beam
        self.alpha = alpha
        self.vocab_cap = vocab_cap
        self.random_state = random_state

    def _model_config(self, vocab_size: int) -> ModelConfig:
        enc = FrontendConfig(self.frontend, self.downsample, self.char_embed_dim, self.lee_kernels)
        dec_variant = "lee" if self.frontend == "gbst" else self.frontend
        dec = FrontendConfig(dec_variant, self.downsample, self.char_embed_dim, self.lee_kernels)
        return ModelConfig(src_vocab=vocab_size, tgt_vocab=vocab_size, enc_layers=self.enc_layers,
                           dec_layers=self.dec_layers, model_dim=self.model_dim, ffn_dim=self.ffn_dim,
                           heads=self.heads, dropout=self.dropout, encoder=enc, decoder=dec,
                           two_step=self.frontend != "direct", lstm_hidden=self.lstm_hidden,
                           lstm_char_dim=self.lstm_char_dim)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(peak_lr=self.peak_lr, warmup=self.warmup, batch_tokens=self.batch_tokens,
                           accumulation=1, max_steps=self.max_steps, max_seconds=self.max_seconds,
                           label_smoothing=self.label_smoothing, seed=self.random_state)

    def fit(self, X, y):
        xs, ys = check_pair(X, y)
        self.vocab_ = build_char_vocab(xs + ys, cap=self.vocab_cap)
        self.model_ = Seq2SeqModel(self._model_config(self.vocab_.size), seed=self.random_state)
        pairs = [(self.vocab_.encode(s), self.vocab_.encode(t)) for s, t in zip(xs, ys)]
        trainer = Trainer(self.model_, pairs, self._train_config())
        trainer.run()
        self.n_steps_ = trainer.state.step
        self.loss_curve_ = [row.train_loss for row in trainer.history]
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        xs = check_texts(X)
        cfg = DecodeConfig(self.strategy, width=self.beam, alpha=self.alpha, seed=self.random_state)
        results = translate(search_model(self.model_), [self.vocab_.encode(x) for x in xs], cfg,
                            to_text=self.vocab_.decode)
        return np.array([self.vocab_.decode(r.ids) for r in results], dtype=object)

    def score(self, X, y) -> float:
        xs, ys = check_pair(X, y)
        return corpus_chrf(list(self.predict(xs)), ys)

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, self.vocab_, self.vocab_, extra={"estimator": self.get_params()})

    @classmethod
    def load(cls, path) -> "CharTranslator":
        ck = load_checkpoint(path)
        params = dict(ck.extra.get("estimator", {}))
        if "lee_kernels" in params:
            params["lee_kernels"] = tuple(tuple(k) for k in params["lee_kernels"])
        est = cls(**params)
        est.model_, est.vocab_ = ck.model, ck.src_vocab
        est.n_steps_ = None
        return est


def fit_translator(sources: Sequence[str], targets: Sequence[str], **params) -> CharTranslator:
    return CharTranslator(**params).fit(sources, targets)
