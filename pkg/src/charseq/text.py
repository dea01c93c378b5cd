"""Character and BPE vocabularies, corpus loading and segmentation."""

from __future__ import annotations

import heapq
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from charseq.errors import DataError, UsageError

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
UNK_TEXT = "�"
EOW = "</w>"

VOCAB_HEADER = "charseq-vocab v1"
BPE_HEADER = "charseq-bpe v1"


@dataclass
class ParallelCorpus:
    sources: list[str]
    targets: list[str]
    path: str = ""

    def __post_init__(self):
        if len(self.sources) != len(self.targets):
            raise DataError(f"unaligned corpus: {len(self.sources)} source vs {len(self.targets)} target lines")

    def __len__(self) -> int:
        return len(self.sources)

    def texts(self) -> Iterable[str]:
        yield from self.sources
        yield from self.targets


def read_lines(path) -> list[str]:
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    out = []
    for number, line in enumerate(lines, start=1):
        try:
            text = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataError(f"{path}: invalid UTF-8 on line {number}") from exc
        out.append(text.replace("\r", ""))
    return out


def load_corpus(src_path, tgt_path) -> ParallelCorpus:
    """Load a sentence-aligned corpus; pairs with an empty side are dropped."""
    src, tgt = read_lines(src_path), read_lines(tgt_path)
    if len(src) != len(tgt):
        raise DataError(f"line count mismatch: ({len(src)}, {len(tgt)})")
    pairs = [(s, t) for s, t in zip(src, tgt) if s.strip() and t.strip()]
    if len(pairs) < len(src):
        logger.warning("dropped %d pairs with an empty side", len(src) - len(pairs))
    return ParallelCorpus([s for s, _ in pairs], [t for _, t in pairs], path=f"{src_path}|{tgt_path}")


def write_lines(path, lines: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


class CharVocab:
    """Bidirectional symbol <-> id map with PAD=0, BOS=1, EOS=2, UNK=3.

    Symbols are usually single characters; BPE reuses this class for its
    multi-character token inventory.
    """

    kind = "char"

    def __init__(self, symbols: Sequence[str]):
        self.symbols = list(RESERVED) + [s for s in symbols]
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise DataError("duplicate symbol in vocabulary")

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def size(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, CharVocab) and self.symbols == other.symbols

    def id_of(self, symbol: str) -> int:
        return self.index.get(symbol, UNK) if symbol not in RESERVED else UNK

    def encode(self, text: str) -> list[int]:
        return [self.id_of(ch) for ch in text]

    def decode(self, ids: Iterable[int]) -> str:
        """Map ids back to text, stopping at EOS and skipping PAD/BOS."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(UNK_TEXT if i == UNK or i >= len(self.symbols) else self.symbols[i])
        return "".join(out)

    def to_text(self) -> str:
        return "\n".join([VOCAB_HEADER] + self.symbols[len(RESERVED):]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CharVocab":
        lines = text.split("\n")
        if not lines or lines[0] != VOCAB_HEADER:
            raise DataError(f"not a vocabulary file (expected header {VOCAB_HEADER!r})")
        body = lines[1:]
        if body and body[-1] == "":
            body.pop()
        return cls(body)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path) -> "CharVocab":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def build_char_vocab(corpus: ParallelCorpus | Iterable[str], cap: int = 300) -> CharVocab:
    """Keep the ``cap - 4`` most frequent characters (ties: lower code point first)."""
    if cap < 5:
        raise UsageError(f"vocabulary cap must be >= 5, got {cap}")
    texts = corpus.texts() if isinstance(corpus, ParallelCorpus) else corpus
    counts: Counter[str] = Counter()
    for line in texts:
        counts.update(line)
    if not counts:
        raise UsageError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], ord(kv[0])))
    return CharVocab([ch for ch, _ in ranked[: cap - len(RESERVED)]])


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word[:-1]) + (word[-1] + EOW,)


@dataclass
class BpeModel:
    """Ordered merge list plus the token inventory it induces.

    The end-of-word marker is glued to the final symbol of each word
    (``low`` -> ``l o w</w>``), so merges never cross word boundaries.
    """

    merges: list[tuple[str, str]]
    vocab: CharVocab
    marker: str = EOW
    _ranks: dict = field(default_factory=dict, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    kind = "bpe"

    def __post_init__(self):
        self._ranks = {pair: rank for rank, pair in enumerate(self.merges)}

    @property
    def size(self) -> int:
        return self.vocab.size

    def __len__(self) -> int:
        return self.vocab.size

    def segment_word(self, word: str) -> tuple[str, ...]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = list(_word_symbols(word))
        while len(symbols) > 1:
            ranked = [(self._ranks.get((a, b)), i) for i, (a, b) in enumerate(zip(symbols, symbols[1:]))]
            ranked = [(r, i) for r, i in ranked if r is not None]
            if not ranked:
                break
            best = min(ranked)[0]
            left, right = self.merges[best]
            merged, i = [], 0
            while i < len(symbols):
                if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
                    merged.append(left + right)
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        result = tuple(symbols)
        self._cache[word] = result
        return result

    def segment(self, text: str) -> list[str]:
        return [tok for word in text.split() for tok in self.segment_word(word)]

    def encode(self, text: str) -> list[int]:
        return [self.vocab.id_of(tok) for tok in self.segment(text)]

    def decode(self, ids: Iterable[int]) -> str:
        tokens = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            tokens.append(UNK_TEXT if i == UNK or i >= self.vocab.size else self.vocab.symbols[i])
        return detokenize(tokens, self.marker)

    def save(self, path) -> None:
        body = [BPE_HEADER] + [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(body) + "\n", encoding="utf-8", newline="\n")
        self.vocab.save(f"{path}.vocab")

    @classmethod
    def load(cls, path) -> "BpeModel":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if not lines or lines[0] != BPE_HEADER:
            raise DataError(f"not a BPE file (expected header {BPE_HEADER!r})")
        merges = []
        for number, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise DataError(f"{path}: malformed merge on line {number}")
            merges.append((parts[0], parts[1]))
        return cls(merges, CharVocab.load(f"{path}.vocab"))


def detokenize(tokens: Iterable[str], marker: str = EOW) -> str:
    return "".join(tokens).replace(marker, " ").rstrip(" ")


def learn_bpe(corpus: ParallelCorpus | Iterable[str], merges: int = 16000) -> BpeModel:
    """Greedy most-frequent-pair merging over the word-frequency table.

    Ties go to the lexicographically smallest (left, right) pair. Learning
    stops early if the corpus runs out of adjacent pairs.
    """
    if merges < 0:
        raise UsageError(f"number of merges must be >= 0, got {merges}")
    texts = corpus.texts() if isinstance(corpus, ParallelCorpus) else corpus
    word_freq: Counter[str] = Counter()
    for line in texts:
        word_freq.update(line.split())
    if not word_freq:
        raise UsageError("cannot learn BPE from an empty corpus")

    words = [list(_word_symbols(w)) for w in word_freq]
    freqs = list(word_freq.values())
    pair_counts: defaultdict[tuple[str, str], int] = defaultdict(int)
    where: defaultdict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, (syms, freq) in enumerate(zip(words, freqs)):
        for pair in zip(syms, syms[1:]):
            pair_counts[pair] += freq
            where[pair].add(wi)
    heap = [(-count, pair) for pair, count in pair_counts.items()]
    heapq.heapify(heap)

    alphabet = sorted({s for syms in words for s in syms})
    learned: list[tuple[str, str]] = []
    while len(learned) < merges and heap:
        neg, pair = heapq.heappop(heap)
        if pair_counts.get(pair, 0) != -neg or neg == 0:
            continue
        learned.append(pair)
        left, right = pair
        joined = left + right
        touched: dict[tuple[str, str], int] = {}
        for wi in list(where[pair]):
            syms, freq = words[wi], freqs[wi]
            for p in zip(syms, syms[1:]):
                pair_counts[p] -= freq
                touched[p] = pair_counts[p]
            merged, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == left and syms[i + 1] == right:
                    merged.append(joined)
                    i += 2
                else:
                    merged.append(syms[i])
                    i += 1
            words[wi] = merged
            for p in zip(syms, syms[1:]):
                where[p].discard(wi)
            for p in zip(merged, merged[1:]):
                pair_counts[p] += freq
                where[p].add(wi)
                touched[p] = pair_counts[p]
        for p in touched:
            count = pair_counts[p]
            if count > 0:
                heapq.heappush(heap, (-count, p))
            else:
                pair_counts.pop(p, None)
    tokens = alphabet + [a + b for a, b in learned]
    seen: set[str] = set(RESERVED)
    inventory = [t for t in tokens if not (t in seen or seen.add(t))]
    return BpeModel(learned, CharVocab(inventory))


def apply_bpe(model: BpeModel, text: str) -> list[int]:
    return model.encode(text)


def load_vocabulary(path) -> CharVocab | BpeModel:
    """Open either vocabulary format, dispatching on the header line."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
    if header == VOCAB_HEADER:
        return CharVocab.load(path)
    if header == BPE_HEADER:
        return BpeModel.load(path)
    raise DataError(f"{path}: unknown vocabulary header {header!r}")
