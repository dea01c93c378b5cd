"""Shared fixtures: the float64 gradient suite and the end-to-end training recipes."""

from __future__ import annotations

import itertools
import math
import time
from collections import Counter
from dataclasses import dataclass
from typing import Callable

import numpy as np

from charseq.decoding import greedy_batch, search_model
from charseq.frontends import FrontendConfig, build_frontend
from charseq.layers import Highway, LSTMCell, MultiHeadAttention, causal_bias, local_bias
from charseq.metrics import corpus_chrf
from charseq.model import ModelConfig, Seq2SeqModel
from charseq.tasks import make_task
from charseq.tensor import Tape, Tensor, gradcheck, ops
from charseq.text import PAD, build_char_vocab
from charseq.training import TrainConfig, Trainer, label_smoothed_nll

F64 = np.float64
GRAD_TOL = 1e-4
INSTANCES = 20
SMALL_KERNELS = ((1, 4), (2, 6), (3, 6))


def leaf(rng, *shape, positive=False, scale=1.0) -> Tensor:
    data = rng.normal(0.0, scale, size=shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data.astype(F64), requires_grad=True)


def jitter(module, rng, scale: float = 0.1) -> None:
    """Move parameters off their initial values (zero biases sit on ReLU kinks)."""
    for p in module.parameters():
        p.data = p.data + rng.normal(0.0, scale, size=p.shape)


# -- op cases -------------------------------------------------------------------------
# Each builder takes an rng and returns (f, inputs), with f rebuilding the graph.

def _unary(op, positive=False):
    def build(rng):
        x = leaf(rng, 3, 4, positive=positive)
        w = rng.normal(size=(3, 4))
        return (lambda: ops.sum(ops.mul(op(x), w))), [x]
    return build


def _binary(op, positive_b=False):
    def build(rng):
        a = leaf(rng, 3, 4)
        b = leaf(rng, 4, positive=positive_b)
        w = rng.normal(size=(3, 4))
        return (lambda: ops.sum(ops.mul(op(a, b), w))), [a, b]
    return build


def _matmul(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    c = leaf(rng, 2, 5, 3)
    w = rng.normal(size=(2, 3, 5))
    w2 = rng.normal(size=(2, 3, 3))
    return (lambda: ops.add(ops.sum(ops.mul(ops.matmul(a, b), w)),
                            ops.sum(ops.mul(ops.matmul(ops.matmul(a, b), c), w2)))), [a, b, c]


def _reductions(rng):
    x = leaf(rng, 2, 3, 4)
    w1, w2 = rng.normal(size=(2, 4)), rng.normal(size=(2, 3, 1))
    return (lambda: ops.add(ops.sum(ops.mul(ops.sum(x, axis=1), w1)),
                            ops.sum(ops.mul(ops.mean(x, axis=-1, keepdims=True), w2)))), [x]


def _shapes(rng):
    x = leaf(rng, 2, 3, 4)
    w = rng.normal(size=(4, 6))
    w2 = rng.normal(size=(3, 2, 4))
    return (lambda: ops.add(ops.sum(ops.mul(ops.reshape(ops.transpose(x, (2, 0, 1)), (4, 6)), w)),
                            ops.sum(ops.mul(ops.swapaxes(x, 0, 1), w2)))), [x]


def _indexing(rng):
    x = leaf(rng, 5, 4)
    idx = np.array([0, 2, 2, 4])
    w = rng.normal(size=(4, 4))
    w2 = rng.normal(size=(2, 3))
    return (lambda: ops.add(ops.sum(ops.mul(ops.index(x, idx), w)),
                            ops.sum(ops.mul(ops.index(x, (slice(1, 3), slice(0, 3))), w2)))), [x]


def _concat_stack(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 2)
    c = leaf(rng, 2, 3)
    w1, w2 = rng.normal(size=(2, 5)), rng.normal(size=(2, 2, 3))
    return (lambda: ops.add(ops.sum(ops.mul(ops.concat([a, b], axis=1), w1)),
                            ops.sum(ops.mul(ops.stack([a, c], axis=0), w2)))), [a, b, c]


def _embedding(rng):
    table = leaf(rng, 6, 3)
    ids = rng.integers(0, 6, size=(2, 5))
    w = rng.normal(size=(2, 5, 3))
    return (lambda: ops.sum(ops.mul(ops.embedding(table, ids), w))), [table]


def _softmaxes(rng):
    x = leaf(rng, 3, 5)
    w1, w2 = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    return (lambda: ops.add(ops.sum(ops.mul(ops.softmax(x), w1)),
                            ops.sum(ops.mul(ops.log_softmax(x), w2)))), [x]


def _gather_nll(rng):
    logits = leaf(rng, 2, 4, 6)
    targets = rng.integers(0, 6, size=(2, 4))
    targets[0, -1] = PAD
    return (lambda: label_smoothed_nll(logits, targets, 0.1)), [logits]


def _layer_norm(rng):
    x, g, b = leaf(rng, 2, 3, 6), leaf(rng, 6), leaf(rng, 6)
    w = rng.normal(size=(2, 3, 6))
    return (lambda: ops.sum(ops.mul(ops.layer_norm(x, g, b), w))), [x, g, b]


def _dropout(rng):
    x = leaf(rng, 4, 5)
    w = rng.normal(size=(4, 5))
    seed = int(rng.integers(1 << 30))

    def f():
        with Tape(training=True, rng=np.random.default_rng(seed)):
            return ops.sum(ops.mul(ops.dropout(x, 0.3), w))
    return f, [x]


def _conv(padding, stride):
    def build(rng):
        x = leaf(rng, 2, 7, 3)
        k = leaf(rng, 3, 3, 4, scale=0.5)
        b = leaf(rng, 4)
        out_len = ops.conv1d(x, k, b, stride=stride, padding=padding).shape[1]
        w = rng.normal(size=(2, out_len, 4))
        return (lambda: ops.sum(ops.mul(ops.conv1d(x, k, b, stride=stride, padding=padding), w))), [x, k, b]
    return build


def _pool(mode):
    def build(rng):
        x = leaf(rng, 2, 7, 3)
        mask = np.ones((2, 7), dtype=bool)
        mask[1, 5:] = False
        w = rng.normal(size=(2, 3, 3))
        return (lambda: ops.sum(ops.mul(ops.pool1d(x, 3, 3, mode, mask), w))), [x]
    return build


def _attention(rng):
    q, k, v = leaf(rng, 2, 3, 4), leaf(rng, 2, 5, 4), leaf(rng, 2, 5, 4)
    bias = np.where(rng.random((2, 1, 5)) < 0.3, -1e9, 0.0)
    bias[..., 0] = 0.0
    w = rng.normal(size=(2, 3, 4))
    return (lambda: ops.sum(ops.mul(ops.attention(q, k, v, bias), w))), [q, k, v]


def _mha(rng):
    mha = MultiHeadAttention(8, 2, rng, F64)
    x = leaf(rng, 2, 4, 8)
    bias = causal_bias(4, F64) + local_bias(4, 2, causal=True, dtype=F64)
    w = rng.normal(size=(2, 4, 8))
    return (lambda: ops.sum(ops.mul(mha(x, x, bias), w))), [x] + list(mha.parameters())


def _lstm(rng):
    cell = LSTMCell(3, 4, rng, F64)
    x, h, c = leaf(rng, 2, 3), leaf(rng, 2, 4), leaf(rng, 2, 4)
    w = rng.normal(size=(2, 4))

    def f():
        h1, c1 = cell(x, h, c)
        h2, c2 = cell(x, h1, c1)
        return ops.add(ops.sum(ops.mul(h2, w)), ops.sum(c2))
    return f, [x, h, c] + list(cell.parameters())


def _highway(rng):
    hw = Highway(5, rng, F64)
    x = leaf(rng, 2, 3, 5)
    w = rng.normal(size=(2, 3, 5))
    return (lambda: ops.sum(ops.mul(hw(x), w))), [x] + list(hw.parameters())


OP_CASES: dict[str, Callable] = {
    "add": _binary(ops.add),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "div": _binary(ops.div, positive_b=True),
    "neg": _unary(ops.neg),
    "matmul": _matmul,
    "exp": _unary(ops.exp),
    "log": _unary(ops.log, positive=True),
    "tanh": _unary(ops.tanh),
    "sigmoid": _unary(ops.sigmoid),
    "relu": _unary(ops.relu),
    "gelu": _unary(ops.gelu),
    "square": _unary(ops.square),
    "sqrt": _unary(ops.sqrt, positive=True),
    "sum/mean": _reductions,
    "reshape/transpose/swapaxes": _shapes,
    "index": _indexing,
    "concat/stack": _concat_stack,
    "embedding": _embedding,
    "softmax/log_softmax": _softmaxes,
    "gather_last/label_smoothed_nll": _gather_nll,
    "layer_norm": _layer_norm,
    "dropout": _dropout,
    "conv1d same": _conv("same", 1),
    "conv1d valid": _conv("valid", 1),
    "conv1d causal": _conv("causal", 1),
    "conv1d strided": _conv("same", 3),
    "pool1d max": _pool("max"),
    "pool1d mean": _pool("mean"),
    "attention": _attention,
    "multi-head attention": _mha,
    "lstm cell": _lstm,
    "highway": _highway,
}


# -- front-end and two-step cases ---------------------------------------------------------

def _frontend_case(variant: str, decoder: bool = False, s: int = 3):
    def build(rng):
        cfg = FrontendConfig(variant, 1 if variant == "direct" else s, char_embed_dim=6, lee_kernels=SMALL_KERNELS,
                             highway_layers=1, lee_ffn_layers=1)
        front = build_frontend(cfg, 9, 8, rng, decoder, F64, heads=2, ffn_dim=12, dropout=0.0)
        jitter(front, rng)
        length = int(rng.integers(4, 9))
        ids = rng.integers(4, 9, size=(2, length))
        ids[1, length - 2:] = PAD
        probe = {}

        def f():
            out = front(ids)
            if "w" not in probe:
                probe["w"] = rng.normal(size=out.states.shape)
            return ops.sum(ops.mul(out.states, probe["w"]))
        return f, list(front.parameters())
    return build


def tiny_two_step_model(rng_seed: int, dtype=F64, variant: str = "lee", s: int = 3, vocab: int = 9) -> Seq2SeqModel:
    fe = FrontendConfig(variant, s, char_embed_dim=6, lee_kernels=SMALL_KERNELS, highway_layers=1, lee_ffn_layers=1)
    cfg = ModelConfig(src_vocab=vocab, tgt_vocab=vocab, enc_layers=1, dec_layers=1, model_dim=8, ffn_dim=12,
                      heads=2, dropout=0.0, encoder=fe, decoder=fe, two_step=True, lstm_hidden=5, lstm_char_dim=6)
    return Seq2SeqModel(cfg, seed=rng_seed, dtype=dtype)


def _two_step(variant: str):
    def build(rng):
        return _two_step_case(rng, variant)
    return build


def _two_step_case(rng, variant: str):
    model = tiny_two_step_model(int(rng.integers(1 << 30)), variant=variant)
    jitter(model, rng)
    src = [list(rng.integers(4, 9, size=int(rng.integers(2, 7)))) for _ in range(2)]
    tgt = [list(rng.integers(4, 9, size=int(rng.integers(1, 7)))) for _ in range(2)]
    S, _, T = model.make_batch(src, tgt)
    params = list(model.named_parameters().values())
    picked = [params[i] for i in rng.choice(len(params), size=min(10, len(params)), replace=False)]

    def f():
        memory, mask = model.encode(S)
        return label_smoothed_nll(model.two_step_forward(memory, mask, T), T, 0.1)
    return f, picked


MODEL_CASES: dict[str, Callable] = {
    "frontend direct": _frontend_case("direct"),
    "frontend lee": _frontend_case("lee"),
    "frontend lee (decoder)": _frontend_case("lee", decoder=True),
    "frontend canine": _frontend_case("canine"),
    "frontend canine (decoder)": _frontend_case("canine", decoder=True),
    "frontend gbst": _frontend_case("gbst"),
    "two-step decoder (lee)": _two_step("lee"),
    "two-step decoder (canine)": _two_step("canine"),
}

# large parameter tensors are probed at a few random coordinates
_MAX_COORDS = {"ops": 24, "models": 3}


def run_case(build: Callable, seed: int, max_coords: int | None) -> float:
    rng = np.random.default_rng(seed)
    f, inputs = build(rng)
    return gradcheck(f, inputs, eps=1e-5, max_coords=max_coords, rng=rng)


def gradient_suite(instances: int = INSTANCES) -> dict[str, float]:
    """Worst relative error per case over ``instances`` random draws."""
    worst = {}
    for group, cases in (("ops", OP_CASES), ("models", MODEL_CASES)):
        for name, build in cases.items():
            worst[name] = max(run_case(build, 1000 * i + 7, _MAX_COORDS[group]) for i in range(instances))
    return worst


# -- end-to-end recipes --------------------------------------------------------------------

@dataclass
class TrainedTask:
    model: Seq2SeqModel
    vocab: object
    test_sources: list[str]
    test_targets: list[str]
    chrf: float
    seconds: float
    steps: int

    def translate(self, sources: list[str]) -> list[str]:
        ids = [self.vocab.encode(s) for s in sources]
        results = greedy_batch(search_model(self.model), ids, max(len(i) for i in ids) + 6)
        return [self.vocab.decode(r.ids) for r in results]


def train_task(task: str, budget_seconds: float = 480.0) -> TrainedTask:
    """Train the copy (direct, 2+2 layers, dim 64) or reverse (Lee s=3, two-step) model."""
    start = time.monotonic()
    n_train = 2000 if task == "copy" else 20000
    train = make_task(task, n_train, seed=1)
    test = make_task(task, 200, seed=2)
    vocab = build_char_vocab(train)
    small = dict(enc_layers=2, dec_layers=2, model_dim=64, ffn_dim=256, heads=4, dropout=0.0)
    if task == "copy":
        cfg = ModelConfig(src_vocab=vocab.size, tgt_vocab=vocab.size, **small)
        tcfg = TrainConfig(peak_lr=1e-3, warmup=200, batch_tokens=800, accumulation=1, max_steps=2000,
                           max_seconds=budget_seconds, seed=0)
    else:
        fe = FrontendConfig("lee", 3, char_embed_dim=32, lee_kernels=((1, 32), (3, 64), (5, 64)))
        cfg = ModelConfig(src_vocab=vocab.size, tgt_vocab=vocab.size, encoder=fe, decoder=fe, two_step=True,
                          lstm_hidden=64, lstm_char_dim=32, **small)
        tcfg = TrainConfig(peak_lr=2e-3, warmup=400, batch_tokens=800, accumulation=1, max_steps=4000,
                           max_seconds=budget_seconds, seed=0)
    model = Seq2SeqModel(cfg, seed=0)
    pairs = [(vocab.encode(s), vocab.encode(t)) for s, t in zip(train.sources, train.targets)]
    trainer = Trainer(model, pairs, tcfg)
    trainer.run()
    done = TrainedTask(model, vocab, test.sources, test.targets, 0.0, 0.0, trainer.state.step)
    hyps = done.translate(test.sources)
    done.chrf = corpus_chrf(hyps, test.targets)
    done.seconds = time.monotonic() - start
    return done


# -- independent oracles ---------------------------------------------------------------------

def reference_chrf(hyp: str, ref: str, order: int = 6, beta: float = 2.0) -> float:
    """Plain-Counter chrF: per-order F_beta averaged over orders present in the reference."""
    h, r = "".join(hyp.split()), "".join(ref.split())
    scores = []
    for n in range(1, order + 1):
        hc = Counter(h[i:i + n] for i in range(len(h) - n + 1))
        rc = Counter(r[i:i + n] for i in range(len(r) - n + 1))
        if not rc:
            continue
        match = sum((hc & rc).values())
        if match == 0:
            scores.append(0.0)
            continue
        p, rec = match / sum(hc.values()), match / sum(rc.values())
        scores.append((1 + beta ** 2) * p * rec / (beta ** 2 * p + rec))
    return sum(scores) / len(scores) if scores else 0.0


def brute_force_mbr(candidates: list[str]) -> int:
    """argmax_i of mean reference_chrf(c_i, c_j) over j != i; first index wins ties."""
    best, best_u = 0, -1.0
    for i, c in enumerate(candidates):
        u = sum(reference_chrf(c, o) for j, o in enumerate(candidates) if j != i) / (len(candidates) - 1)
        if u > best_u + 1e-12:
            best, best_u = i, u
    return best


def brute_force_best(probs, eos: int, max_len: int) -> tuple[tuple, float]:
    """Highest-probability complete sequence of a memoryless model by listing every candidate."""
    logp = np.log(np.asarray(probs) / np.sum(probs))
    best, best_score = None, -np.inf
    for n in range(1, max_len + 1):
        for seq in itertools.product(range(len(logp)), repeat=n):
            if eos in seq[:-1] or (seq[-1] != eos and n < max_len):
                continue
            score = math.fsum(logp[list(seq)])
            if score > best_score:
                best, best_score = seq, score
    return best, best_score
