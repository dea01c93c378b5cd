"""chrF and BLEU scoring plus percentile bootstrap intervals."""

from __future__ import annotations

import math
import re
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from charseq.errors import UsageError

_WHITESPACE = re.compile(r"\s+")


@dataclass(frozen=True)
class ChrfConfig:
    char_order: int = 6
    word_order: int = 0
    beta: float = 2.0
    effective_order: bool = True

    def __post_init__(self):
        if self.char_order < 1:
            raise UsageError(f"chrF char_order must be >= 1, got {self.char_order}")
        if self.word_order != 0:
            raise UsageError("word n-grams are not supported (word_order must be 0)")
        if self.beta <= 0:
            raise UsageError(f"chrF beta must be > 0, got {self.beta}")

    @property
    def signature(self) -> str:
        eff = "yes" if self.effective_order else "no"
        return f"chrF{self.beta:g}|eff:{eff}|nc:{self.char_order}|nw:{self.word_order}|space:no"


DEFAULT_CHRF = ChrfConfig()


def _ngrams(text: str, n: int) -> Counter:
    return Counter(text[i:i + n] for i in range(len(text) - n + 1))


def chrf_statistics(hypothesis: str, reference: str, cfg: ChrfConfig = DEFAULT_CHRF) -> np.ndarray:
    """Per-order (matches, hyp_total, ref_total) as an array of shape (nc, 3)."""
    hyp = _WHITESPACE.sub("", hypothesis)
    ref = _WHITESPACE.sub("", reference)
    stats = np.zeros((cfg.char_order, 3), dtype=np.int64)
    for n in range(1, cfg.char_order + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        stats[n - 1] = (sum((h & r).values()), sum(h.values()), sum(r.values()))
    return stats


def chrf_from_statistics(stats: np.ndarray, cfg: ChrfConfig = DEFAULT_CHRF) -> float:
    beta2 = cfg.beta ** 2
    scores = []
    for match, hyp_total, ref_total in stats:
        if ref_total == 0 and cfg.effective_order:
            continue
        p = match / hyp_total if hyp_total else 0.0
        r = match / ref_total if ref_total else 0.0
        denom = beta2 * p + r
        scores.append((1 + beta2) * p * r / denom if denom > 0 else 0.0)
    return float(np.mean(scores)) if scores else 0.0


def chrf(hypothesis: str, reference: str, cfg: ChrfConfig = DEFAULT_CHRF, warn: bool = True) -> float:
    """Sentence chrF in [0, 1], averaging F_beta over the n-gram orders the reference has."""
    stats = chrf_statistics(hypothesis, reference, cfg)
    if stats[0, 2] == 0:
        if warn:
            warnings.warn("chrF reference is empty after whitespace removal; scoring 0", stacklevel=2)
        return 0.0
    return chrf_from_statistics(stats, cfg)


def corpus_chrf(hypotheses: Sequence[str], references: Sequence[str], cfg: ChrfConfig = DEFAULT_CHRF) -> float:
    """Corpus chrF from n-gram statistics summed over all sentences."""
    _check_pairs(hypotheses, references)
    total = sum(chrf_statistics(h, r, cfg) for h, r in zip(hypotheses, references))
    if total[0, 2] == 0:
        warnings.warn("chrF references are empty after whitespace removal; scoring 0", stacklevel=2)
        return 0.0
    return chrf_from_statistics(total, cfg)


def sentence_chrf(hypotheses: Sequence[str], references: Sequence[str], cfg: ChrfConfig = DEFAULT_CHRF) -> list[float]:
    _check_pairs(hypotheses, references)
    return [chrf(h, r, cfg) for h, r in zip(hypotheses, references)]


def _check_pairs(hypotheses, references) -> None:
    if len(hypotheses) != len(references):
        raise UsageError(f"hypothesis/reference count mismatch ({len(hypotheses)}, {len(references)})")
    if not hypotheses:
        raise UsageError("cannot score an empty corpus")


# -- BLEU -----------------------------------------------------------------------------

def tokenize_13a(line: str) -> str:
    """mteval-v13a tokenisation: split punctuation and symbols, keep digit-internal dots and commas."""
    norm = line.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    norm = norm.replace("&quot;", '"').replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">")
    norm = f" {norm} "
    norm = re.sub(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])", r" \1 ", norm)
    norm = re.sub(r"([^0-9])([\.,])", r"\1 \2 ", norm)
    norm = re.sub(r"([\.,])([^0-9])", r" \1 \2", norm)
    norm = re.sub(r"([0-9])(-)", r"\1 \2 ", norm)
    return " ".join(norm.split())


def bleu_statistics(hypothesis: str, reference: str, order: int = 4) -> np.ndarray:
    """[hyp_len, ref_len, match_1, total_1, ..., match_N, total_N]."""
    hyp = tokenize_13a(hypothesis).split()
    ref = tokenize_13a(reference).split()
    out = [len(hyp), len(ref)]
    for n in range(1, order + 1):
        h = Counter(tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1))
        r = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
        out += [sum((h & r).values()), sum(h.values())]
    return np.asarray(out, dtype=np.int64)


def bleu_from_statistics(stats: np.ndarray, order: int = 4, effective_order: bool = True) -> float:
    """BLEU from summed statistics.

    With ``effective_order`` the geometric mean stops at the highest order
    that has any hypothesis n-grams, so corpora of very short lines are not
    scored 0 by construction. Otherwise a missing order yields 0.
    """
    hyp_len, ref_len = int(stats[0]), int(stats[1])
    if hyp_len == 0:
        return 0.0
    smooth = 1.0
    logs = []
    for n in range(order):
        match, total = int(stats[2 + 2 * n]), int(stats[3 + 2 * n])
        if total == 0:
            if not effective_order:
                return 0.0
            break
        if match == 0:
            smooth *= 2
            logs.append(math.log(1.0 / (smooth * total)))
        else:
            logs.append(math.log(match / total))
    bp = 1.0 if hyp_len >= ref_len else math.exp(1 - ref_len / hyp_len)
    return bp * math.exp(sum(logs) / len(logs))


def bleu(hypotheses: Sequence[str], references: Sequence[str], order: int = 4,
         effective_order: bool = True) -> float:
    """Corpus BLEU in [0, 1] with 13a tokenisation and exponential smoothing of zero counts."""
    _check_pairs(hypotheses, references)
    total = sum(bleu_statistics(h, r, order) for h, r in zip(hypotheses, references))
    return bleu_from_statistics(total, order, effective_order)


# -- bootstrap -------------------------------------------------------------------------

def bootstrap_ci(scores: Sequence[float], resamples: int = 1000, level: float = 0.95,
                 seed=0) -> tuple[float, float]:
    """Percentile interval of the mean over ``resamples`` seeded resamples with replacement."""
    values = np.asarray(scores, dtype=np.float64)
    if values.size == 0:
        raise UsageError("bootstrap needs at least one score")
    if resamples < 1:
        raise UsageError(f"resamples must be >= 1, got {resamples}")
    if not 0 < level < 1:
        raise UsageError(f"confidence level must be in (0, 1), got {level}")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, values.size, size=(resamples, values.size))
    means = values[idx].mean(axis=1)
    tail = (1 - level) / 2 * 100
    low, high = np.percentile(means, [tail, 100 - tail])
    return float(low), float(high)


def bootstrap_corpus_ci(per_sentence_stats: np.ndarray, score, resamples: int = 1000, level: float = 0.95,
                        seed=0) -> tuple[float, float]:
    """Percentile interval of a corpus metric recomputed from resampled sentence statistics.

    ``per_sentence_stats`` has one leading row per sentence; ``score`` maps
    summed statistics to the metric value.
    """
    stats = np.asarray(per_sentence_stats)
    if len(stats) == 0:
        raise UsageError("bootstrap needs at least one sentence")
    if not 0 < level < 1:
        raise UsageError(f"confidence level must be in (0, 1), got {level}")
    rng = np.random.default_rng(seed)
    values = [score(stats[rng.integers(0, len(stats), size=len(stats))].sum(axis=0)) for _ in range(resamples)]
    tail = (1 - level) / 2 * 100
    low, high = np.percentile(values, [tail, 100 - tail])
    return float(low), float(high)


def corpus_report(hypotheses: Sequence[str], references: Sequence[str], bootstrap: int = 0, seed=0,
                  cfg: ChrfConfig = DEFAULT_CHRF) -> list[tuple[str, float | None, float | None, float | None]]:
    """(metric, value, ci_low, ci_high) rows for chrF and BLEU; COMET is listed without a value."""
    _check_pairs(hypotheses, references)
    chrf_stats = np.stack([chrf_statistics(h, r, cfg) for h, r in zip(hypotheses, references)])
    bleu_stats = np.stack([bleu_statistics(h, r) for h, r in zip(hypotheses, references)])
    rows = []
    for name, stats, fn in (("chrF", chrf_stats, lambda s: chrf_from_statistics(s, cfg)),
                            ("BLEU", bleu_stats, bleu_from_statistics)):
        value = fn(stats.sum(axis=0))
        low = high = None
        if bootstrap:
            low, high = bootstrap_corpus_ci(stats, fn, bootstrap, seed=seed)
        rows.append((name, value, low, high))
    rows.append(("COMET", None, None, None))
    return rows


REPORT_HEADER = "metric\tvalue\tci_low\tci_high"


def format_report(rows) -> str:
    def cell(x):
        return "n/a" if x is None else f"{x:.6f}"
    lines = [REPORT_HEADER] + [f"{name}\t{cell(v)}\t{cell(lo)}\t{cell(hi)}" for name, v, lo, hi in rows]
    return "\n".join(lines) + "\n"
