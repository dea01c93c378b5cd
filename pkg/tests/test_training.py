import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from charseq.errors import TrainingDiverged, UsageError
from charseq.model import ModelConfig, Seq2SeqModel
from charseq.tasks import make_task
from charseq.tensor import Tape, Tensor, backward
from charseq.text import PAD, build_char_vocab
from charseq.training import (
    Adam,
    MetricsLog,
    TrainConfig,
    Trainer,
    average_parameters,
    clip_grad_norm,
    evaluate_loss,
    label_smoothed_nll,
    lr_at,
    token_batches,
    train,
)


def tiny_setup(n=200, dropout=0.0, seed=0):
    data = make_task("copy", n, seed=seed, max_len=6)
    vocab = build_char_vocab(data)
    cfg = ModelConfig(src_vocab=vocab.size, tgt_vocab=vocab.size, enc_layers=1, dec_layers=1, model_dim=32,
                      ffn_dim=64, heads=2, dropout=dropout)
    pairs = [(vocab.encode(s), vocab.encode(t)) for s, t in zip(data.sources, data.targets)]
    return Seq2SeqModel(cfg, seed=0), pairs


def test_lr_schedule():
    cfg = TrainConfig(peak_lr=1e-3, warmup=100)
    assert lr_at(50, cfg) == pytest.approx(5e-4)
    assert lr_at(100, cfg) == pytest.approx(1e-3)
    assert lr_at(400, cfg) == pytest.approx(5e-4)
    with pytest.raises(UsageError):
        lr_at(0, cfg)


def test_label_smoothing_against_numpy():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 3, 5))
    targets = np.array([[1, 2, PAD], [4, 3, 2]])
    eps = 0.1
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    valid = targets != PAD
    nll = -np.take_along_axis(logp, targets[..., None], -1)[..., 0]
    per = (1 - eps) * nll + eps * -logp.mean(-1)
    expected = per[valid].mean()
    assert label_smoothed_nll(Tensor(logits), targets, eps).item() == pytest.approx(expected, rel=1e-12)


def test_label_smoothing_all_padding():
    with pytest.raises(UsageError):
        label_smoothed_nll(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), dtype=int), 0.1)


def test_adam_matches_reference_update():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam((0.9, 0.98), 1e-9)
    m = v = np.zeros(2)
    ref = p.data.copy()
    for t in range(1, 4):
        g = np.array([0.5, -1.5]) * t
        p.grad = g.copy()
        opt.step({"p": p}, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.98 * v + 0.02 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.98 ** t)) + 1e-9)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_adam_rejects_non_finite_gradients():
    p = Tensor(np.ones(2), requires_grad=True)
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(TrainingDiverged):
        Adam().step({"p": p}, 0.1)


def test_clip_grad_norm():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([3.0, 4.0])
    assert clip_grad_norm({"p": p}, 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0)


@given(st.lists(st.tuples(st.integers(1, 20), st.integers(1, 20)), min_size=1, max_size=60),
       st.integers(21, 200))
def test_token_batches_partition_and_budget(lengths, budget):
    pairs = [([4] * a, [4] * b) for a, b in lengths]
    batches = token_batches(pairs, budget, np.random.default_rng(0))
    assert sorted(i for b in batches for i in b) == list(range(len(pairs)))
    for b in batches:
        longest = max(max(len(pairs[i][0]), len(pairs[i][1])) + 1 for i in b)
        assert len(b) == 1 or longest * len(b) <= budget


def test_training_reduces_loss():
    model, pairs = tiny_setup()
    before = evaluate_loss(model, pairs)
    train(model, pairs, TrainConfig(peak_lr=3e-3, warmup=20, batch_tokens=300, accumulation=1, max_steps=60))
    assert evaluate_loss(model, pairs) < 0.7 * before


def test_accumulation_matches_one_large_batch():
    """Two micro-batches normalised by their joint token count give the gradient of the union."""
    model, pairs = tiny_setup(20)
    a, b = pairs[:10], pairs[10:]
    from charseq.training import batch_loss

    model.zero_grad()
    with Tape():
        loss, _ = batch_loss(model, a + b, 0.1, reduction="sum")
        backward(loss)
    whole = {k: v.grad.copy() for k, v in model.named_parameters().items()}
    model.zero_grad()
    for part in (a, b):
        with Tape():
            loss, _ = batch_loss(model, part, 0.1, reduction="sum")
            backward(loss)
    for k, v in model.named_parameters().items():
        np.testing.assert_allclose(v.grad, whole[k], rtol=1e-4, atol=1e-6)


def test_same_seed_same_losses_with_dropout():
    runs = []
    for _ in range(2):
        model, pairs = tiny_setup(dropout=0.2)
        _, history = train(model, pairs, TrainConfig(batch_tokens=200, accumulation=2, max_steps=15, warmup=5,
                                                     seed=4))
        runs.append([r.train_loss for r in history])
    assert runs[0] == runs[1]


def test_divergence_raises():
    model, pairs = tiny_setup(20)
    with pytest.raises(TrainingDiverged):
        train(model, pairs, TrainConfig(peak_lr=1e12, warmup=1, batch_tokens=300, accumulation=1, max_steps=50))


def test_time_budget_stops_training():
    model, pairs = tiny_setup(50)
    state, _ = train(model, pairs, TrainConfig(batch_tokens=100, accumulation=1, max_steps=10_000,
                                               max_seconds=0.5))
    assert 0 < state.step < 10_000


def test_metrics_log_and_validation(tmp_path):
    model, pairs = tiny_setup(60)
    log = MetricsLog(tmp_path / "m.tsv")
    cfg = TrainConfig(batch_tokens=200, accumulation=1, max_steps=6, warmup=2, valid_every=2, keep_best=2,
                      average_best=True)
    Trainer(model, pairs, cfg, valid=pairs[:10], log=log).run()
    lines = (tmp_path / "m.tsv").read_text().splitlines()
    assert lines[0] == "step\tlr\ttrain_loss\tvalid_loss"
    assert len(lines) == 7
    assert lines[2].split("\t")[3] != "" and lines[1].split("\t")[3] == ""


def test_average_parameters():
    out = average_parameters([{"w": np.array([1.0, 3.0])}, {"w": np.array([3.0, 5.0])}])
    np.testing.assert_allclose(out["w"], [2.0, 4.0])


def test_config_validation():
    for bad in (dict(warmup=0), dict(label_smoothing=1.0), dict(accumulation=0)):
        with pytest.raises(UsageError):
            TrainConfig(**bad)
    assert TrainConfig.preset("wmt").clip_norm == 5.0
    assert math.isclose(TrainConfig.preset("wmt").betas[1], 0.998)
