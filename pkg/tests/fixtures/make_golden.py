"""Regenerate the golden checkpoint and its expected logits (run from the repo root)."""

from pathlib import Path

import numpy as np

from charseq.checkpoint import save_checkpoint
from charseq.frontends import FrontendConfig
from charseq.model import ModelConfig, Seq2SeqModel
from charseq.text import CharVocab

HERE = Path(__file__).parent
SRC = np.array([[4, 5, 6, 7, 8], [9, 5, 4, 0, 0]])
TGT_OUT = np.array([[5, 6, 7, 2, 0, 0], [8, 2, 0, 0, 0, 0]])


def golden_model() -> tuple[Seq2SeqModel, CharVocab]:
    vocab = CharVocab(list("abcdef"))
    fe = FrontendConfig("lee", 3, char_embed_dim=4, lee_kernels=((1, 4), (3, 4)))
    cfg = ModelConfig(src_vocab=vocab.size, tgt_vocab=vocab.size, enc_layers=1, dec_layers=1, model_dim=8,
                      ffn_dim=16, heads=2, dropout=0.0, encoder=fe, decoder=fe, two_step=True, lstm_hidden=8,
                      lstm_char_dim=4)
    return Seq2SeqModel(cfg, seed=11), vocab


if __name__ == "__main__":
    model, vocab = golden_model()
    save_checkpoint(HERE / "golden.ckpt", model, vocab, vocab)
    np.save(HERE / "golden_logits.npy", model.logits(SRC, None, TGT_OUT).data)
