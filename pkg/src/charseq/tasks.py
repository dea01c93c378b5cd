"""Synthetic string-transduction corpora for smoke training."""

from __future__ import annotations

import numpy as np

from charseq.text import ParallelCorpus

ALPHABET = "abcdefghijklmnopqrstuvwxyz"
TASKS = ("copy", "reverse")


def random_strings(n: int, rng: np.random.Generator, alphabet: str = ALPHABET,
                   min_len: int = 3, max_len: int = 12) -> list[str]:
    letters = np.array(list(alphabet))
    lengths = rng.integers(min_len, max_len + 1, size=n)
    return ["".join(rng.choice(letters, size=k)) for k in lengths]


def make_task(task: str, n: int, seed: int = 0, alphabet: str = ALPHABET,
              min_len: int = 3, max_len: int = 12) -> ParallelCorpus:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {TASKS}")
    rng = np.random.default_rng(seed)
    sources = random_strings(n, rng, alphabet, min_len, max_len)
    targets = list(sources) if task == "copy" else [s[::-1] for s in sources]
    return ParallelCorpus(sources, targets, path=f"<{task}:{seed}>")
