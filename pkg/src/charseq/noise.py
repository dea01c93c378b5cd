"""Synthetic typo noise and replicated noisy evaluation."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from charseq.errors import UsageError
from charseq.metrics import corpus_chrf

NOISE_OPS = ("swap_adjacent", "delete", "insert", "substitute")

_ROWS = ("1234567890-=", "qwertyuiop[]", "asdfghjkl;'", "zxcvbnm,./")
# each keyboard row is shifted right by about half a key relative to the one above
_OFFSETS = (0.0, 0.5, 0.75, 1.25)


def _keyboard_neighbours() -> dict[str, str]:
    pos = {ch: (r, c + _OFFSETS[r]) for r, row in enumerate(_ROWS) for c, ch in enumerate(row)}
    table = {}
    for ch, (r, x) in pos.items():
        near = [o for o, (r2, x2) in pos.items()
                if o != ch and abs(r2 - r) <= 1 and abs(x2 - x) <= (1.0 if r2 == r else 0.75)]
        table[ch] = "".join(sorted(near))
    return table


KEYBOARD = _keyboard_neighbours()


def neighbours(ch: str) -> str:
    """QWERTY neighbours of ``ch`` (case preserved); empty for keys off the table."""
    near = KEYBOARD.get(ch.lower(), "")
    return near.upper() if ch.isupper() else near


@dataclass(frozen=True)
class NoiseConfig:
    rate: float
    ops: tuple[str, ...] = NOISE_OPS
    seed: int = 0
    replicas: int = 20

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise UsageError(f"noise rate must be in [0, 1], got {self.rate}")
        if not self.ops:
            raise UsageError("at least one noise op must be enabled")
        unknown = set(self.ops) - set(NOISE_OPS)
        if unknown:
            raise UsageError(f"unknown noise ops {sorted(unknown)}; choose from {NOISE_OPS}")
        if self.replicas < 1:
            raise UsageError(f"replicas must be >= 1, got {self.replicas}")


def make_noise(text: str, cfg: NoiseConfig, rng: np.random.Generator | None = None) -> str:
    """Perturb each non-space character with probability ``cfg.rate``.

    A perturbed character gets one enabled op chosen uniformly. A swap
    exchanges it with its right neighbour (the left one for the final
    character) and the moved character is not revisited. Insert adds a
    keyboard neighbour after it; substitute replaces it by one. Keys with
    no neighbour fall back to a random lowercase letter.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    chars = list(text)
    out: list[str] = []
    i = 0
    while i < len(chars):
        ch = chars[i]
        if ch.isspace() or cfg.rate == 0 or rng.random() >= cfg.rate:
            out.append(ch)
            i += 1
            continue
        op = cfg.ops[rng.integers(len(cfg.ops))]
        if op == "swap_adjacent":
            if i + 1 < len(chars):
                out += [chars[i + 1], ch]
                i += 2
                continue
            if out:
                out[-1], ch = ch, out[-1]
            out.append(ch)
        elif op == "insert":
            out += [ch, _pick_neighbour(ch, rng)]
        elif op == "substitute":
            out.append(_pick_neighbour(ch, rng))
        i += 1
    return "".join(out)


def _pick_neighbour(ch: str, rng: np.random.Generator) -> str:
    near = neighbours(ch) or "abcdefghijklmnopqrstuvwxyz"
    return near[rng.integers(len(near))]


def noisy_corpus(sources: Sequence[str], cfg: NoiseConfig, replica: int) -> list[str]:
    rng = np.random.default_rng([cfg.seed, replica])
    return [make_noise(s, cfg, rng) for s in sources]


@dataclass
class NoisyReport:
    mean: float
    std: float
    scores: list[float]

    def rows(self) -> list[str]:
        return [f"{i}\t{s:.6f}" for i, s in enumerate(self.scores)]


def noisy_eval(translate: Callable[[list[str]], list[str]], sources: Sequence[str], references: Sequence[str],
               cfg: NoiseConfig, metric: Callable[[list[str], list[str]], float] = corpus_chrf,
               workers: int = 1) -> NoisyReport:
    """Translate ``cfg.replicas`` independently noised copies of ``sources`` and score each."""
    if len(sources) != len(references):
        raise UsageError(f"source/reference count mismatch ({len(sources)}, {len(references)})")

    def run(replica: int) -> float:
        return metric(list(translate(noisy_corpus(sources, cfg, replica))), list(references))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            scores = list(pool.map(run, range(cfg.replicas)))
    else:
        scores = [run(r) for r in range(cfg.replicas)]
    values = np.asarray(scores)
    return NoisyReport(float(values.mean()), float(values.std()), scores)
