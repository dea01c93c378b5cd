"""Greedy, beam (with length normalisation), sampling and MBR decoding.

Search code talks to a small incremental interface instead of a concrete
network. A *search model* exposes ``vocab_size``, ``eos``, ``start(sources)``
and ``advance(states, tokens)``; every state carries ``log_probs``, the
next-token distribution after its prefix. :class:`TransformerSearch` and
:class:`TwoStepSearch` adapt :class:`~charseq.model.Seq2SeqModel`; the toy
models below make search behaviour checkable by enumeration.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from charseq.errors import UsageError
from charseq.metrics import chrf, corpus_chrf
from charseq.model import Seq2SeqModel
from charseq.tensor import Tensor, no_grad
from charseq.text import BOS, EOS, PAD

STRATEGIES = ("greedy", "beam", "sample", "mbr")


@dataclass
class DecodeConfig:
    strategy: str = "greedy"
    width: int = 5
    alpha: float = 1.0
    temperature: float = 1.0
    seed: int = 0
    n_samples: int = 100
    max_len: int | None = None
    workers: int = 1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise UsageError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.width < 1:
            raise UsageError(f"beam width must be >= 1, got {self.width}")
        if self.alpha < 0:
            raise UsageError(f"alpha must be >= 0, got {self.alpha}")
        if self.temperature <= 0:
            raise UsageError(f"temperature must be > 0, got {self.temperature}")
        if self.n_samples < 1:
            raise UsageError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.max_len is not None and self.max_len < 1:
            raise UsageError(f"max_len must be >= 1, got {self.max_len}")


@dataclass
class DecodeResult:
    ids: list[int]
    step_logprobs: list[float]
    raw_score: float
    normalized_score: float
    finished: bool

    def __len__(self) -> int:
        return len(self.ids)


def normalize(raw: float, length: int, alpha: float) -> float:
    return raw / (max(length, 1) ** alpha)


def _result(ids, logps, alpha: float, eos: int) -> DecodeResult:
    raw = float(math.fsum(logps))
    finished = bool(ids) and ids[-1] == eos
    return DecodeResult(list(ids), list(logps), raw, normalize(raw, len(ids), alpha), finished)


# -- toy search models ------------------------------------------------------------

@dataclass(frozen=True)
class ToyState:
    tokens: tuple
    log_probs: np.ndarray = field(compare=False)


class MemorylessModel:
    """Emits every token from the same distribution regardless of the prefix."""

    def __init__(self, probs: Sequence[float], eos: int):
        p = np.asarray(probs, dtype=np.float64)
        self.log_p = np.log(p / p.sum())
        self.vocab_size = len(p)
        self.eos = eos

    def start(self, sources) -> list[ToyState]:
        return [ToyState((), self.log_p) for _ in sources]

    def advance(self, states, tokens) -> list[ToyState]:
        return [ToyState(s.tokens + (int(t),), self.log_p) for s, t in zip(states, tokens)]


class MarkovModel:
    """Next-token distribution indexed by (position, previous token); random tables by seed."""

    def __init__(self, vocab_size: int, eos: int, max_len: int, seed: int = 0, sharpness: float = 2.0):
        rng = np.random.default_rng(seed)
        logits = rng.normal(0.0, sharpness, size=(max_len + 1, vocab_size + 1, vocab_size))
        self.table = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
        self.vocab_size = vocab_size
        self.eos = eos

    def _lp(self, tokens: tuple) -> np.ndarray:
        prev = tokens[-1] if tokens else self.vocab_size
        return self.table[min(len(tokens), len(self.table) - 1), prev]

    def start(self, sources) -> list[ToyState]:
        return [ToyState((), self._lp(())) for _ in sources]

    def advance(self, states, tokens) -> list[ToyState]:
        out = []
        for s, t in zip(states, tokens):
            toks = s.tokens + (int(t),)
            out.append(ToyState(toks, self._lp(toks)))
        return out


def enumerate_best(model, max_len: int, alpha: float = 0.0, source=None) -> tuple[tuple, float]:
    """Exhaustive search over all sequences up to ``max_len`` (EOS-terminated or full length)."""
    best, best_score = None, -math.inf
    frontier = model.start([source])
    for _ in range(max_len):
        nxt_states, nxt_tokens = [], []
        for state in frontier:
            for tok in range(model.vocab_size):
                nxt_states.append(state)
                nxt_tokens.append(tok)
        children = model.advance(nxt_states, nxt_tokens)
        frontier = []
        for parent, tok, child in zip(nxt_states, nxt_tokens, children):
            score = _path_score(model, child.tokens, source)
            if tok == model.eos or len(child.tokens) == max_len:
                norm = normalize(score, len(child.tokens), alpha)
                if norm > best_score:
                    best, best_score = child.tokens, norm
            else:
                frontier.append(child)
    return best, best_score


def _path_score(model, tokens: tuple, source=None) -> float:
    state = model.start([source])[0]
    total = 0.0
    for i, t in enumerate(tokens):
        total += float(state.log_probs[t])
        state = model.advance([state], [t])[0]
    return total


# -- Seq2Seq adapters -----------------------------------------------------------------

def _stack_memory(states) -> tuple[Tensor, np.ndarray]:
    longest = max(s.memory.shape[0] for s in states)
    dim = states[0].memory.shape[1]
    mem = np.zeros((len(states), longest, dim), dtype=states[0].memory.dtype)
    mask = np.zeros((len(states), longest), dtype=bool)
    for i, s in enumerate(states):
        n = s.memory.shape[0]
        mem[i, :n] = s.memory
        mask[i, :n] = s.mask
    return Tensor(mem), mask


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return (shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))).astype(np.float64)


@dataclass
class Seq2SeqState:
    memory: np.ndarray
    mask: np.ndarray
    tokens: tuple
    log_probs: np.ndarray
    h: np.ndarray | None = None
    c: np.ndarray | None = None
    cond: np.ndarray | None = None


class _Seq2SeqSearch:
    def __init__(self, model: Seq2SeqModel):
        self.model = model
        self.vocab_size = model.cfg.tgt_vocab
        self.eos = EOS

    def _encode(self, sources) -> list[tuple[np.ndarray, np.ndarray]]:
        src = np.full((len(sources), max(len(s) for s in sources)), PAD, dtype=np.int64)
        for i, s in enumerate(sources):
            src[i, : len(s)] = s
        memory, mask = self.model.encode(src)
        return [(memory.data[i], mask[i]) for i in range(len(sources))]


class TransformerSearch(_Seq2SeqSearch):
    """Standard autoregressive decoder; each step re-runs the decoder over the prefix."""

    def _next(self, memories, prefixes) -> list[np.ndarray]:
        holder = [Seq2SeqState(m, k, (), None) for m, k in memories]
        memory, mask = _stack_memory(holder)
        longest = max(len(p) for p in prefixes) + 1
        tgt = np.full((len(prefixes), longest), PAD, dtype=np.int64)
        tgt[:, 0] = BOS
        for i, p in enumerate(prefixes):
            tgt[i, 1:len(p) + 1] = p
        logits = self.model.decode_forward(memory, mask, tgt).data
        rows = logits[np.arange(len(prefixes)), [len(p) for p in prefixes]]
        return list(_log_softmax(rows))

    def start(self, sources) -> list[Seq2SeqState]:
        with no_grad():
            encoded = self._encode(sources)
            dists = self._next(encoded, [() for _ in sources])
        return [Seq2SeqState(m, k, (), lp) for (m, k), lp in zip(encoded, dists)]

    def advance(self, states, tokens) -> list[Seq2SeqState]:
        prefixes = [s.tokens + (int(t),) for s, t in zip(states, tokens)]
        with no_grad():
            dists = self._next([(s.memory, s.mask) for s in states], prefixes)
        return [Seq2SeqState(s.memory, s.mask, p, lp) for s, p, lp in zip(states, prefixes, dists)]


class TwoStepSearch(_Seq2SeqSearch):
    """Block decoder: one Transformer call per ``s`` characters, a recurrent step per character."""

    def __init__(self, model: Seq2SeqModel):
        if not model.cfg.two_step:
            raise UsageError("TwoStepSearch needs a model with the two-step decoder")
        super().__init__(model)
        self.s = model.block

    def _block_conditioning(self, states, prefixes) -> list[np.ndarray]:
        """One batched Transformer call; returns the (s, c) conditioning of each next block."""
        s = self.s
        memory, mask = _stack_memory(states)
        longest = max(len(p) for p in prefixes) + s
        inp = np.full((len(prefixes), longest), PAD, dtype=np.int64)
        inp[:, 0] = BOS
        for i, p in enumerate(prefixes):
            inp[i, s:s + len(p)] = p
        front = self.model.tgt_frontend(inp)
        hidden = self.model.decoder_states(memory, mask, front)
        cond = self.model.head.projections(hidden).data
        return [cond[i, len(p):len(p) + s] for i, p in enumerate(prefixes)]

    def _step(self, prev, cond, h, c):
        head = self.model.head
        logits, h2, c2 = head.step(np.asarray(prev), Tensor(cond), Tensor(h), Tensor(c))
        return _log_softmax(logits.data), h2.data, c2.data

    def start(self, sources) -> list[Seq2SeqState]:
        with no_grad():
            encoded = self._encode(sources)
            holders = [Seq2SeqState(m, k, (), None) for m, k in encoded]
            conds = self._block_conditioning(holders, [() for _ in sources])
            hidden = self.model.cfg.lstm_hidden
            dtype = self.model.dtype
            h = np.zeros((len(sources), hidden), dtype=dtype)
            c = np.zeros_like(h)
            lp, h, c = self._step([BOS] * len(sources), np.stack([x[0] for x in conds]), h, c)
        return [Seq2SeqState(m, k, (), lp[i], h[i], c[i], conds[i]) for i, (m, k) in enumerate(encoded)]

    def advance(self, states, tokens) -> list[Seq2SeqState]:
        s = self.s
        prefixes = [st.tokens + (int(t),) for st, t in zip(states, tokens)]
        conds = [st.cond for st in states]
        hs = np.stack([st.h for st in states])
        cs = np.stack([st.c for st in states])
        with no_grad():
            boundary = [i for i, p in enumerate(prefixes) if len(p) % s == 0]
            if boundary:
                fresh = self._block_conditioning([states[i] for i in boundary], [prefixes[i] for i in boundary])
                for i, cond in zip(boundary, fresh):
                    conds[i] = cond
                    if self.model.head.reset_per_block:
                        hs[i] = 0.0
                        cs[i] = 0.0
            step_cond = np.stack([conds[i][len(p) % s] for i, p in enumerate(prefixes)])
            lp, hs, cs = self._step([int(t) for t in tokens], step_cond, hs, cs)
        return [Seq2SeqState(st.memory, st.mask, p, lp[i], hs[i], cs[i], conds[i])
                for i, (st, p) in enumerate(zip(states, prefixes))]


def search_model(model: Seq2SeqModel):
    return TwoStepSearch(model) if model.cfg.two_step else TransformerSearch(model)


def generate_block(model: Seq2SeqModel, src_ids, prefix_chars: Sequence[int],
                   select: Callable[[np.ndarray], int] | None = None) -> tuple[list[int], list[np.ndarray]]:
    """Produce the next ``s`` characters after ``prefix_chars`` (a whole number of blocks).

    Runs the decoder front-end and exactly one Transformer decoder call, then
    ``s`` recurrent steps. Once EOS is chosen the remaining slots are PAD.
    Returns the block and the per-step next-character distributions.
    """
    if not model.cfg.two_step:
        raise UsageError("generate_block needs a model with the two-step decoder")
    s = model.block
    prefix = [int(c) for c in prefix_chars]
    if len(prefix) % s:
        raise UsageError(f"prefix length {len(prefix)} is not a multiple of the block size {s}")
    select = select or (lambda p: int(np.argmax(p)))
    with no_grad():
        memory, mask = model.encode(np.asarray(src_ids)[None])
        inp = np.array([[BOS] + [PAD] * (s - 1) + prefix], dtype=np.int64)
        hidden = model.decoder_states(memory, mask, model.tgt_frontend(inp))
        cond = model.head.projections(hidden).data[0]
        head = model.head
        h, c = head.cell.zero_state(1, model.dtype)
        prev = BOS
        for t, ch in enumerate(prefix):
            if head.reset_per_block and t and t % s == 0:
                h, c = head.cell.zero_state(1, model.dtype)
            _, h, c = head.step([prev], Tensor(cond[t][None]), h, c)
            prev = ch
        if head.reset_per_block and prefix:
            h, c = head.cell.zero_state(1, model.dtype)
        block, dists = [], []
        for j in range(s):
            if EOS in block:
                block.append(PAD)
                continue
            logits, h, c = head.step([prev], Tensor(cond[len(prefix) + j][None]), h, c)
            probs = np.exp(_log_softmax(logits.data)[0])
            dists.append(probs)
            prev = select(probs)
            block.append(prev)
    return block, dists


# -- strategies ---------------------------------------------------------------------

def _lockstep(model, sources, max_len: int, choose: Callable[[np.ndarray], np.ndarray],
              alpha: float = 0.0) -> list[DecodeResult]:
    states = model.start(sources)
    ids: list[list[int]] = [[] for _ in sources]
    logps: list[list[float]] = [[] for _ in sources]
    live = list(range(len(sources)))
    for _ in range(max_len):
        dists = np.stack([states[i].log_probs for i in live])
        picks = choose(dists)
        cont_idx, cont_tok = [], []
        for row, i in enumerate(live):
            tok = int(picks[row])
            ids[i].append(tok)
            logps[i].append(float(dists[row, tok]))
            if tok != model.eos and len(ids[i]) < max_len:
                cont_idx.append(i)
                cont_tok.append(tok)
        if not cont_idx:
            break
        advanced = model.advance([states[i] for i in cont_idx], cont_tok)
        for i, st in zip(cont_idx, advanced):
            states[i] = st
        live = cont_idx
    return [_result(i, lp, alpha, model.eos) for i, lp in zip(ids, logps)]


def greedy_batch(model, sources, max_len: int) -> list[DecodeResult]:
    """Argmax decoding of many sources in lockstep; ties go to the lowest id."""
    return _lockstep(model, sources, max_len, lambda d: d.argmax(axis=-1))


def greedy(model, source, max_len: int) -> DecodeResult:
    return greedy_batch(model, [source], max_len)[0]


def _sampler(temperature: float, rng: np.random.Generator):
    def choose(dists: np.ndarray) -> np.ndarray:
        scaled = dists / temperature
        scaled -= scaled.max(axis=-1, keepdims=True)
        probs = np.exp(scaled)
        probs /= probs.sum(axis=-1, keepdims=True)
        cdf = np.cumsum(probs, axis=-1)
        u = rng.random(len(dists))[:, None]
        return np.minimum((cdf < u).sum(axis=-1), dists.shape[1] - 1)
    return choose


def sample_batch(model, sources, temperature: float, seed, max_len: int) -> list[DecodeResult]:
    """Ancestral sampling from softmax(log p / temperature); scores use the untempered model."""
    if temperature <= 0:
        raise UsageError(f"temperature must be > 0, got {temperature}")
    rng = np.random.default_rng(seed)
    return _lockstep(model, sources, max_len, _sampler(temperature, rng))


def sample(model, source, temperature: float, seed, max_len: int) -> DecodeResult:
    return sample_batch(model, [source], temperature, seed, max_len)[0]


def beam(model, source, width: int, alpha: float, max_len: int) -> list[DecodeResult]:
    """Beam search returning hypotheses ranked by raw / len**alpha.

    Each step keeps the ``width`` best expansions; those ending in EOS
    leave the beam as finished hypotheses. Search stops when no live
    hypothesis can still overtake the best finished one, when none remain,
    or at ``max_len`` (survivors are then returned unfinished). Raw scores
    only fall as a hypothesis grows, so ``raw / max_len**alpha`` bounds what
    a live one can still reach.
    """
    if width < 1:
        raise UsageError(f"beam width must be >= 1, got {width}")
    live = [(model.start([source])[0], [], [])]
    finished: list[DecodeResult] = []
    for step in range(max_len):
        dists = np.stack([st.log_probs for st, _, _ in live])
        totals = np.array([math.fsum(lp) for _, _, lp in live])[:, None] + dists
        flat = totals.reshape(-1)
        order = np.argsort(-flat, kind="stable")[:width]
        cont, cont_tok, cont_hist = [], [], []
        for k in order:
            row, tok = divmod(int(k), dists.shape[1])
            state, ids, lps = live[row]
            ids2, lps2 = ids + [tok], lps + [float(dists[row, tok])]
            if tok == model.eos or step + 1 == max_len:
                finished.append(_result(ids2, lps2, alpha, model.eos))
            else:
                cont.append(state)
                cont_tok.append(tok)
                cont_hist.append((ids2, lps2))
        if not cont:
            break
        if finished:
            best = max(r.normalized_score for r in finished)
            reach = max(math.fsum(lps) for _, lps in cont_hist) / max_len ** alpha
            if best >= reach:
                break
        advanced = model.advance(cont, cont_tok)
        live = [(st, ids, lps) for st, (ids, lps) in zip(advanced, cont_hist)]
    finished.sort(key=lambda r: -r.normalized_score)
    return finished


def mbr_select(candidates: Sequence[str], model_scores: Sequence[float] | None = None) -> int:
    """Index of the candidate with the highest mean chrF against the other candidates.

    Each candidate is scored as hypothesis against every other candidate
    as reference. Ties go to the higher model score, then the lower index.
    """
    n = len(candidates)
    if n == 0:
        raise UsageError("MBR needs at least one candidate")
    if n == 1:
        return 0
    utility = utility_matrix(candidates)
    expected = (utility.sum(axis=1) - np.diag(utility)) / (n - 1)
    scores = list(model_scores) if model_scores is not None else [0.0] * n
    return max(range(n), key=lambda i: (expected[i], scores[i], -i))


def utility_matrix(candidates: Sequence[str]) -> np.ndarray:
    n = len(candidates)
    out = np.zeros((n, n))
    for i, j in itertools.product(range(n), repeat=2):
        if i != j:
            out[i, j] = chrf(candidates[i], candidates[j], warn=False)
    return out


def mbr(model, source, n: int, to_text: Callable[[list[int]], str], temperature: float = 1.0,
        seed=0, max_len: int = 100) -> DecodeResult:
    """Minimum Bayes risk selection among ``n`` ancestral samples, chrF utility."""
    if n < 1:
        raise UsageError(f"MBR needs n >= 1, got {n}")
    samples = sample_batch(model, [source] * n, temperature, seed, max_len)
    texts = [to_text(r.ids) for r in samples]
    return samples[mbr_select(texts, [r.raw_score for r in samples])]


# -- corpus-level helpers -----------------------------------------------------------------

def default_max_len(source_len: int) -> int:
    return 2 * source_len + 10


def translate(model, sources: Sequence[Sequence[int]], cfg: DecodeConfig,
              to_text: Callable[[list[int]], str] | None = None, chunk: int = 128) -> list[DecodeResult]:
    """Decode every source with the configured strategy; output order follows input order."""
    if not sources:
        return []
    if cfg.strategy == "mbr" and to_text is None:
        raise UsageError("MBR decoding needs a to_text callback")

    def limit(src) -> int:
        return cfg.max_len or default_max_len(len(src))

    if cfg.strategy in ("greedy", "sample"):
        results: list[DecodeResult] = []
        order = sorted(range(len(sources)), key=lambda i: len(sources[i]))
        out: dict[int, DecodeResult] = {}
        for c in range(0, len(order), chunk):
            idx = order[c:c + chunk]
            srcs = [sources[i] for i in idx]
            max_len = max(limit(s) for s in srcs)
            if cfg.strategy == "greedy":
                batch = greedy_batch(model, srcs, max_len)
            else:
                batch = sample_batch(model, srcs, cfg.temperature, [cfg.seed, c], max_len)
            for i, r in zip(idx, batch):
                if len(r.ids) > limit(sources[i]):
                    r = _result(r.ids[: limit(sources[i])], r.step_logprobs[: limit(sources[i])], 0.0, EOS)
                out[i] = r
        results = [out[i] for i in range(len(sources))]
        return results

    def one(i: int) -> DecodeResult:
        src = sources[i]
        if cfg.strategy == "beam":
            return beam(model, src, cfg.width, cfg.alpha, limit(src))[0]
        return mbr(model, src, cfg.n_samples, to_text, cfg.temperature, [cfg.seed, i], limit(src))

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            return list(pool.map(one, range(len(sources))))
    return [one(i) for i in range(len(sources))]


def pearson(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, str]:
    """Pearson correlation plus a flag: ``ok``, ``flat`` (zero variance, reported as 0) or ``n/a``."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if len(x) < 2:
        return 0.0, "n/a"
    sx, sy = x.std(), y.std()
    if sx == 0 or sy == 0:
        return 0.0, "flat"
    return float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy)), "ok"


@dataclass
class SweepRow:
    width: int
    alpha: float
    chrf: float
    pearson: float
    flag: str

    def tsv(self) -> str:
        return f"{self.width}\t{self.alpha:g}\t{self.chrf:.6f}\t{self.pearson:.6f}\t{self.flag}"


SWEEP_HEADER = "width\talpha\tchrf\tpearson\tpearson_flag"


def beam_sweep(model, sources: Sequence[Sequence[int]], references: Sequence[str], widths: Sequence[int],
               alphas: Sequence[float], to_text: Callable[[list[int]], str],
               max_len: int | None = None, min_corr_width: int = 5) -> list[SweepRow]:
    """chrF for every (width, alpha); per alpha, Pearson of width vs chrF over widths >= 5."""
    if not widths or not alphas:
        raise UsageError("beam sweep needs at least one width and one alpha")
    scores: dict[tuple[int, float], float] = {}
    for alpha in alphas:
        for width in widths:
            cfg = DecodeConfig("beam", width=width, alpha=alpha, max_len=max_len)
            hyps = [to_text(r.ids) for r in translate(model, sources, cfg)]
            scores[width, alpha] = corpus_chrf(hyps, references)
    rows = []
    for alpha in alphas:
        wide = [w for w in widths if w >= min_corr_width]
        corr, flag = pearson(wide, [scores[w, alpha] for w in wide])
        rows.extend(SweepRow(w, alpha, scores[w, alpha], corr, flag) for w in widths)
    return rows

