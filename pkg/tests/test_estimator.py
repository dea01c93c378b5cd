import numpy as np
import pytest
from sklearn.base import clone

from charseq.errors import UsageError
from charseq.estimator import BpeTokenizer, CharTokenizer, CharTranslator
from charseq.tasks import make_task

TINY = dict(enc_layers=1, dec_layers=1, model_dim=16, ffn_dim=32, heads=2, max_steps=10, batch_tokens=200)


@pytest.fixture(scope="module")
def fitted():
    data = make_task("copy", 60, seed=0, max_len=6)
    return CharTranslator(**TINY).fit(data.sources, data.targets), data


def test_tokenizers_round_trip():
    texts = ["hello world", "good day"]
    char = CharTokenizer().fit(texts)
    assert char.inverse_transform(char.transform(texts)) == texts
    bpe = BpeTokenizer(merges=5).fit(texts)
    assert bpe.inverse_transform(bpe.transform(texts)) == texts


def test_clone_and_params():
    est = CharTranslator(frontend="lee", downsample=3)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.set_params(beam=2).beam == 2


def test_fit_predict_score(fitted):
    est, data = fitted
    pred = est.predict(data.sources[:5])
    assert isinstance(pred, np.ndarray) and pred.dtype == object and len(pred) == 5
    assert 0.0 <= est.score(data.sources[:5], data.targets[:5]) <= 1.0
    assert est.n_steps_ == 10 and len(est.loss_curve_) == 10


def test_two_step_estimator():
    data = make_task("reverse", 40, seed=0, max_len=6)
    est = CharTranslator(frontend="lee", downsample=3, lee_kernels=((1, 4), (3, 4)), char_embed_dim=8,
                         lstm_hidden=8, lstm_char_dim=8, **{**TINY, "max_steps": 3})
    assert len(est.fit(data.sources, data.targets).predict(["abc"])) == 1


def test_save_load(fitted, tmp_path):
    est, data = fitted
    est.save(tmp_path / "e.ckpt")
    back = CharTranslator.load(tmp_path / "e.ckpt")
    assert back.get_params() == est.get_params()
    assert list(back.predict(data.sources[:5])) == list(est.predict(data.sources[:5]))


@pytest.mark.parametrize("X,y", [("abc", ["a"]), (["a", "b"], ["a"]), ([], []), ([1], ["a"]), ([""], ["a"])])
def test_input_validation(X, y):
    with pytest.raises(UsageError):
        CharTranslator(**TINY).fit(X, y)


def test_predict_before_fit():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        CharTranslator().predict(["a"])
