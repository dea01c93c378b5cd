"""Run configuration: INI-style sections, presets and ``section.key=value`` overrides.

Values are layered defaults < preset < config file < overrides. Every key
is checked against the dataclass schema of its section; unknown sections,
unknown keys and unparsable values raise :class:`UsageError`.
"""

from __future__ import annotations

import configparser
import dataclasses
import types
import typing
from io import StringIO
from dataclasses import dataclass, field
from pathlib import Path

from charseq.decoding import DecodeConfig
from charseq.errors import UsageError
from charseq.frontends import DEFAULT_LEE_KERNELS, FrontendConfig
from charseq.metrics import ChrfConfig
from charseq.model import ModelConfig
from charseq.noise import NOISE_OPS, NoiseConfig
from charseq.training import TrainConfig


@dataclass
class RunSection:
    name: str = "charseq"
    output_dir: str = "runs/charseq"
    seed: int = 0
    task: str | None = None
    task_size: int = 2000
    train_src: str | None = None
    train_tgt: str | None = None
    valid_src: str | None = None
    valid_tgt: str | None = None
    vocab: str | None = None
    vocab_cap: int = 300

    def __post_init__(self):
        if self.task not in (None, "copy", "reverse"):
            raise UsageError(f"run.task must be copy or reverse, got {self.task!r}")
        if self.task_size < 1:
            raise UsageError(f"run.task_size must be >= 1, got {self.task_size}")


@dataclass
class ModelSection:
    enc_layers: int = 6
    dec_layers: int = 6
    model_dim: int = 512
    ffn_dim: int = 2048
    heads: int = 8
    dropout: float = 0.1
    two_step: bool | None = None
    lstm_hidden: int = 128
    lstm_char_dim: int = 64
    share_char_embeddings: bool = True
    reset_lstm_per_block: bool = False
    tie_output: bool = False
    max_positions: int = 512

    def __post_init__(self):
        for key in ("enc_layers", "dec_layers", "model_dim", "ffn_dim", "heads", "lstm_hidden", "lstm_char_dim"):
            if getattr(self, key) < 1:
                raise UsageError(f"model.{key} must be >= 1, got {getattr(self, key)}")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError(f"model.dropout must be in [0, 1), got {self.dropout}")


@dataclass
class FrontendSection:
    variant: str = "direct"
    downsample: int = 1
    decoder_variant: str | None = None
    char_embed_dim: int = 64
    lee_kernels: tuple[tuple[int, int], ...] = DEFAULT_LEE_KERNELS
    canine_span: int | None = None
    highway_layers: int = 2
    lee_ffn_layers: int = 2

    def encoder(self) -> FrontendConfig:
        return FrontendConfig(self.variant, self.downsample, self.char_embed_dim, self.lee_kernels,
                              self.canine_span, self.highway_layers, self.lee_ffn_layers)

    def decoder(self) -> FrontendConfig:
        variant = self.decoder_variant or ("lee" if self.variant == "gbst" else self.variant)
        return FrontendConfig(variant, self.downsample if variant != "direct" else 1, self.char_embed_dim,
                              self.lee_kernels, self.canine_span, self.highway_layers, self.lee_ffn_layers)


@dataclass
class NoiseSection:
    rate: float | None = None
    ops: tuple[str, ...] = NOISE_OPS
    seed: int = 0
    replicas: int = 20

    def build(self) -> NoiseConfig:
        if self.rate is None:
            raise UsageError("noise.rate is required for noisy evaluation (no default is assumed)")
        return NoiseConfig(self.rate, self.ops, self.seed, self.replicas)


SECTIONS: dict[str, type] = {
    "run": RunSection,
    "model": ModelSection,
    "frontend": FrontendSection,
    "training": TrainConfig,
    "decoding": DecodeConfig,
    "metric": ChrfConfig,
    "noise": NoiseSection,
}

_SMALL_MODEL = {"enc_layers": 2, "dec_layers": 2, "model_dim": 64, "ffn_dim": 256, "heads": 4, "dropout": 0.0}

PRESETS: dict[str, dict[str, dict]] = {
    "direct": {"frontend": {"variant": "direct", "downsample": 1}},
    "lee": {"frontend": {"variant": "lee", "downsample": 3}},
    "canine": {"frontend": {"variant": "canine", "downsample": 3}},
    "gbst": {"frontend": {"variant": "gbst", "downsample": 3}},
    "copy": {
        "run": {"task": "copy", "task_size": 2000},
        "model": _SMALL_MODEL,
        "frontend": {"variant": "direct", "downsample": 1},
        "training": {"peak_lr": 1e-3, "warmup": 200, "batch_tokens": 800, "accumulation": 1, "max_steps": 2000},
    },
    "reverse": {
        "run": {"task": "reverse", "task_size": 20000},
        "model": {**_SMALL_MODEL, "lstm_hidden": 64, "lstm_char_dim": 32},
        "frontend": {"variant": "lee", "downsample": 3, "char_embed_dim": 32,
                     "lee_kernels": ((1, 32), (3, 64), (5, 64))},
        "training": {"peak_lr": 2e-3, "warmup": 400, "batch_tokens": 800, "accumulation": 1, "max_steps": 4000},
    },
}


# -- value coercion -----------------------------------------------------------------

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(raw, hint, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        if isinstance(raw, str) and raw.strip().lower() in ("", "none", "null"):
            return None
        if raw is None:
            return None
        return _coerce(raw, inner[0], where)
    if not isinstance(raw, str):
        return _check_typed(raw, hint, where)
    text = raw.strip()
    try:
        if hint is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if origin is tuple:
            items = [p.strip() for p in text.split(",") if p.strip()]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(_coerce_item(p, args[0], where) for p in items)
            if len(items) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values")
            return tuple(_coerce(p, a, where) for p, a in zip(items, args))
    except ValueError as exc:
        raise UsageError(f"{where}: cannot parse {raw!r} as {_describe(hint)} ({exc})") from None
    raise UsageError(f"{where}: unsupported type {hint}")


def _coerce_item(text: str, hint, where: str):
    # kernel pairs are written width:filters
    if typing.get_origin(hint) is tuple:
        return tuple(_coerce(p, a, where) for p, a in zip(text.split(":"), typing.get_args(hint)))
    return _coerce(text, hint, where)


def _check_typed(value, hint, where: str):
    expected = typing.get_origin(hint) or hint
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, bool):
        raise UsageError(f"{where}: expected int, got bool")
    if not isinstance(value, expected):
        raise UsageError(f"{where}: expected {_describe(hint)}, got {type(value).__name__}")
    return value


def _describe(hint) -> str:
    return getattr(hint, "__name__", str(hint))


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(":".join(map(str, v)) if isinstance(v, tuple) else str(v) for v in value)
    return "none" if value is None else str(value)


# -- RunConfig ------------------------------------------------------------------------

@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    frontend: FrontendSection = field(default_factory=FrontendSection)
    training: TrainConfig = field(default_factory=TrainConfig)
    decoding: DecodeConfig = field(default_factory=DecodeConfig)
    metric: ChrfConfig = field(default_factory=ChrfConfig)
    noise: NoiseSection = field(default_factory=NoiseSection)

    @classmethod
    def build(cls, preset: str | None = None, path=None, overrides=(), **sections) -> "RunConfig":
        """Layer a preset, an INI file and ``section.key=value`` overrides over the defaults."""
        values: dict[str, dict] = {name: {} for name in SECTIONS}
        if preset is not None:
            if preset not in PRESETS:
                raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
            for section, items in PRESETS[preset].items():
                values[section].update(items)
        if path is not None:
            for section, items in read_ini(path).items():
                values[section].update(items)
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot:
                raise UsageError(f"override {item!r} must look like section.key=value")
            _check_section(section, f"override {item!r}")
            values[section][name] = value
        for section, items in sections.items():
            _check_section(section, "keyword")
            values[section].update(items)
        built = {name: _build_section(name, items) for name, items in values.items()}
        return cls(**built)

    def model_config(self, src_vocab: int, tgt_vocab: int) -> ModelConfig:
        encoder = self.frontend.encoder()
        decoder = self.frontend.decoder()
        body = dataclasses.asdict(self.model)
        two_step = body.pop("two_step")
        if two_step is None:
            two_step = decoder.variant != "direct"
        return ModelConfig(src_vocab=src_vocab, tgt_vocab=tgt_vocab, encoder=encoder, decoder=decoder,
                           two_step=two_step, **body)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            obj = getattr(self, name)
            parser[name] = {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                            if not f.name.startswith("_")}
        buf = StringIO()
        parser.write(buf)
        return buf.getvalue()


def _check_section(section: str, where: str) -> None:
    if section not in SECTIONS:
        raise UsageError(f"{where}: unknown section [{section}]; expected one of {sorted(SECTIONS)}")


def _build_section(name: str, items: dict):
    cls = SECTIONS[name]
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(items) - known)
    if unknown:
        raise UsageError(f"[{name}] unknown key(s) {unknown}; allowed: {sorted(known)}")
    kwargs = {key: _coerce(value, hints[key], f"{name}.{key}") for key, value in items.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise UsageError(f"[{name}] {exc}") from None


def read_ini(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    out = {}
    for section in parser.sections():
        _check_section(section, str(path))
        out[section] = dict(parser[section])
    return out
