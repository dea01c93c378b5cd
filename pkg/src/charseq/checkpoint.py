"""Portable single-file checkpoints.

Layout::

    CHARSEQ1\\n
    uint64 LE  metadata length, then that many bytes of UTF-8 JSON
    repeated until EOF:
        uint16 LE name length, UTF-8 name
        uint8 rank, rank x uint32 LE dims
        float32 LE payload (4 * prod(dims) bytes)

Parameters are stored as ``param/<name>``; Adam moments as ``adam_m/<name>``
and ``adam_v/<name>`` so training resumes exactly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from charseq.errors import DataError
from charseq.model import ModelConfig, Seq2SeqModel
from charseq.text import BpeModel, CharVocab
from charseq.training import Adam, TrainConfig, TrainState

MAGIC = b"CHARSEQ1\n"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")

Vocabulary = CharVocab | BpeModel


def vocab_to_dict(vocab: Vocabulary) -> dict:
    if isinstance(vocab, BpeModel):
        return {"kind": "bpe", "merges": [list(m) for m in vocab.merges], "vocab": vocab.vocab.to_text()}
    return {"kind": "char", "vocab": vocab.to_text()}


def vocab_from_dict(data: dict) -> Vocabulary:
    inventory = CharVocab.from_text(data["vocab"])
    if data.get("kind") == "bpe":
        return BpeModel([tuple(m) for m in data["merges"]], inventory)
    return inventory


def same_vocabulary(a: Vocabulary, b: Vocabulary) -> bool:
    return vocab_to_dict(a) == vocab_to_dict(b)


@dataclass
class Checkpoint:
    model: Seq2SeqModel
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    state: TrainState | None = None
    train_config: TrainConfig | None = None
    extra: dict = field(default_factory=dict)


def _write_tensor(fh, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype=_LE_F32).tobytes())


def _read_exact(fh, n: int, path) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DataError(f"{path}: truncated checkpoint")
    return data


def _read_tensors(fh, path) -> dict[str, np.ndarray]:
    tensors = {}
    while True:
        head = fh.read(2)
        if not head:
            return tensors
        if len(head) != 2:
            raise DataError(f"{path}: truncated checkpoint")
        (name_len,) = struct.unpack("<H", head)
        name = _read_exact(fh, name_len, path).decode("utf-8")
        (rank,) = struct.unpack("<B", _read_exact(fh, 1, path))
        shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, path))
        count = int(np.prod(shape)) if rank else 1
        payload = _read_exact(fh, 4 * count, path)
        tensors[name] = np.frombuffer(payload, dtype=_LE_F32).reshape(shape).astype(np.float32)


def save_checkpoint(path, model: Seq2SeqModel, src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                    state: TrainState | None = None, train_config: TrainConfig | None = None,
                    extra: dict | None = None) -> Path:
    """Write atomically (temporary file then rename); parameters are stored as float32."""
    path = Path(path)
    meta = {
        "format": FORMAT_VERSION,
        "model": model.cfg.to_dict(),
        "src_vocab": vocab_to_dict(src_vocab),
        "tgt_vocab": vocab_to_dict(tgt_vocab),
        "state": state.metadata() if state is not None else None,
        "adam": {"betas": list(state.optimizer.betas), "eps": state.optimizer.eps} if state is not None else None,
        "train": asdict(train_config) if train_config is not None else None,
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, p in model.named_parameters().items():
            _write_tensor(fh, f"param/{name}", p.data)
        if state is not None:
            for name in sorted(state.optimizer.m):
                _write_tensor(fh, f"adam_m/{name}", state.optimizer.m[name])
                _write_tensor(fh, f"adam_v/{name}", state.optimizer.v[name])
    os.replace(tmp, path)
    return path


def read_metadata(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    if fh.read(len(MAGIC)) != MAGIC:
        raise DataError(f"{path}: not a charseq checkpoint (bad magic)")
    (length,) = struct.unpack("<Q", _read_exact(fh, 8, path))
    try:
        return json.loads(_read_exact(fh, length, path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint metadata ({exc})") from exc


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot open checkpoint {path}: {exc.strerror}") from exc
    with fh:
        meta = _read_header(fh, path)
        tensors = _read_tensors(fh, path)
    if meta.get("format") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    model = Seq2SeqModel(ModelConfig.from_dict(meta["model"]), seed=0, dtype=np.float32)
    params = model.named_parameters()
    missing = [n for n in params if f"param/{n}" not in tensors]
    if missing:
        raise DataError(f"{path}: checkpoint lacks parameters {missing[:3]}")
    for name, p in params.items():
        stored = tensors[f"param/{name}"]
        if stored.shape != p.data.shape:
            raise DataError(f"{path}: parameter {name} has shape {stored.shape}, model expects {p.data.shape}")
        p.data = stored.copy()
    state = None
    if meta.get("state") is not None:
        info = dict(meta["state"])
        adam = Adam(tuple(meta["adam"]["betas"]), meta["adam"]["eps"])
        adam.t = info.pop("adam_t")
        for key, value in tensors.items():
            kind, _, name = key.partition("/")
            if kind == "adam_m":
                adam.m[name] = value.copy()
            elif kind == "adam_v":
                adam.v[name] = value.copy()
        state = TrainState(optimizer=adam, **info)
    train_cfg = TrainConfig(**meta["train"]) if meta.get("train") else None
    return Checkpoint(model, vocab_from_dict(meta["src_vocab"]), vocab_from_dict(meta["tgt_vocab"]),
                      state, train_cfg, meta.get("extra", {}))
