"""Character-level neural machine translation on a small numpy autodiff core."""

from charseq.checkpoint import load_checkpoint, save_checkpoint
from charseq.decoding import DecodeConfig, DecodeResult, beam, greedy, mbr, sample, search_model, translate
from charseq.errors import CharseqError, DataError, DimensionError, NumericError, TrainingDiverged, UsageError
from charseq.frontends import FrontendConfig
from charseq.metrics import ChrfConfig, bleu, bootstrap_ci, chrf, corpus_chrf
from charseq.model import ModelConfig, Seq2SeqModel
from charseq.noise import NoiseConfig, make_noise, noisy_eval
from charseq.text import BpeModel, CharVocab, build_char_vocab, learn_bpe, load_corpus
from charseq.training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BpeModel", "CharVocab", "CharseqError", "ChrfConfig", "DataError", "DecodeConfig", "DecodeResult",
    "DimensionError", "FrontendConfig", "ModelConfig", "NoiseConfig", "NumericError", "Seq2SeqModel",
    "TrainConfig", "TrainingDiverged", "UsageError", "beam", "bleu", "bootstrap_ci", "build_char_vocab",
    "chrf", "corpus_chrf", "greedy", "learn_bpe", "load_checkpoint", "load_corpus", "make_noise", "mbr",
    "noisy_eval", "sample", "save_checkpoint", "search_model", "train", "translate",
]
