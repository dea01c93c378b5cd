import numpy as np
import pytest

from charseq.checkpoint import load_checkpoint, read_metadata, save_checkpoint
from charseq.errors import DataError
from charseq.model import ModelConfig, Seq2SeqModel
from charseq.text import learn_bpe
from charseq.training import TrainConfig, Trainer
from fixtures.make_golden import HERE, SRC, TGT_OUT, golden_model
from test_training import tiny_setup


def test_golden_checkpoint_loads_with_expected_logits():
    ck = load_checkpoint(HERE / "golden.ckpt")
    expected = np.load(HERE / "golden_logits.npy")
    got = ck.model.logits(SRC, None, TGT_OUT).data
    assert got.tobytes() == expected.tobytes()
    assert ck.src_vocab.symbols[4:] == list("abcdef")


def test_golden_checkpoint_is_stable(tmp_path):
    model, vocab = golden_model()
    save_checkpoint(tmp_path / "g.ckpt", model, vocab, vocab)
    assert (tmp_path / "g.ckpt").read_bytes() == (HERE / "golden.ckpt").read_bytes()


def test_round_trip_is_bit_identical(tmp_path):
    model, vocab = golden_model()
    save_checkpoint(tmp_path / "m.ckpt", model, vocab, vocab)
    loaded = load_checkpoint(tmp_path / "m.ckpt").model
    for name, p in model.named_parameters().items():
        assert p.data.tobytes() == loaded.named_parameters()[name].data.tobytes()


def test_resume_matches_continuous_training(tmp_path):
    cfg = TrainConfig(batch_tokens=150, accumulation=2, max_steps=6, warmup=3, seed=2)
    model, pairs = tiny_setup(80, dropout=0.1)
    straight = Trainer(model, pairs, cfg)
    straight.run()
    full = [r.train_loss for r in straight.history]

    model, pairs = tiny_setup(80, dropout=0.1)
    first = Trainer(model, pairs, TrainConfig(**{**cfg.__dict__, "max_steps": 3}))
    first.run()
    from charseq.text import CharVocab
    vocab = CharVocab(["a"])
    save_checkpoint(tmp_path / "r.ckpt", model, vocab, vocab, first.state, cfg)
    ck = load_checkpoint(tmp_path / "r.ckpt")
    second = Trainer(ck.model, pairs, cfg, state=ck.state)
    second.run()
    assert [r.train_loss for r in first.history + second.history] == full


def test_metadata_and_bpe_vocab(tmp_path):
    bpe = learn_bpe(["low lower lowest"], merges=3)
    cfg = ModelConfig(src_vocab=bpe.size, tgt_vocab=bpe.size, enc_layers=1, dec_layers=1, model_dim=8, ffn_dim=8,
                      heads=2)
    save_checkpoint(tmp_path / "b.ckpt", Seq2SeqModel(cfg), bpe, bpe, extra={"note": "x"})
    meta = read_metadata(tmp_path / "b.ckpt")
    assert meta["model"]["src_vocab"] == bpe.size
    ck = load_checkpoint(tmp_path / "b.ckpt")
    assert ck.src_vocab.merges == bpe.merges
    assert ck.extra == {"note": "x"}


def test_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" * 4)
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_truncated(tmp_path):
    data = (HERE / "golden.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[: len(data) - 7])
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "t.ckpt")


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_no_temporary_left_behind(tmp_path):
    model, vocab = golden_model()
    save_checkpoint(tmp_path / "m.ckpt", model, vocab, vocab)
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]
