import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import _support
from charseq.errors import UsageError
from charseq.frontends import FrontendConfig, block_average_matrix, block_mask, build_frontend, pad_block
from charseq.tensor import no_grad
from charseq.text import PAD

VOCAB = 12
CONFIGS = [("direct", 1), ("lee", 1), ("lee", 3), ("canine", 3), ("canine", 5), ("gbst", 3), ("gbst", 5)]


def make(variant, s, decoder=False, seed=0):
    cfg = FrontendConfig(variant, s, char_embed_dim=8, lee_kernels=_support.SMALL_KERNELS)
    fe = build_frontend(cfg, VOCAB, 16, np.random.default_rng(seed), decoder=decoder, heads=2, ffn_dim=16,
                        dtype=np.float64)
    _support.jitter(fe, np.random.default_rng(seed + 1))
    return fe


def states(fe, ids):
    with no_grad():
        return fe(np.asarray(ids)).states.data


@pytest.mark.parametrize("variant,s", CONFIGS)
@pytest.mark.parametrize("length", [1, 2, 7, 15, 16])
def test_output_length(variant, s, length):
    out = make(variant, s)(np.full((2, length), 5))
    assert out.length == math.ceil(length / s)
    assert out.states.shape == (2, out.length, 16)
    assert out.mask.all()


@pytest.mark.parametrize("variant,s", CONFIGS)
def test_padding_does_not_change_valid_states(variant, s):
    fe = make(variant, s)
    rng = np.random.default_rng(1)
    short = rng.integers(4, VOCAB, size=(1, 7))
    padded = np.concatenate([short, np.full((1, 8), PAD)], axis=1)
    n = math.ceil(7 / s)
    np.testing.assert_allclose(states(fe, padded)[:, :n], states(fe, short), atol=1e-10)


@pytest.mark.parametrize("variant,s", [("direct", 1), ("lee", 1), ("lee", 3), ("canine", 3), ("canine", 5)])
@given(data=st.data())
def test_decoder_frontends_are_block_causal(variant, s, data):
    fe = make(variant, s, decoder=True)
    length = data.draw(st.integers(2 * s, 5 * s))
    ids = np.array([data.draw(st.lists(st.integers(4, VOCAB - 1), min_size=length, max_size=length))])
    cut = data.draw(st.integers(1, math.ceil(length / s) - 1))
    changed = ids.copy()
    changed[0, cut * s:] = (changed[0, cut * s:] - 3) % (VOCAB - 4) + 4
    np.testing.assert_allclose(states(fe, ids)[:, :cut], states(fe, changed)[:, :cut], atol=1e-10)


def test_encoder_frontends_see_the_future():
    fe = make("lee", 3)
    ids = np.array([[4, 5, 6, 7, 8, 9]])
    changed = ids.copy()
    changed[0, 3] = 10
    assert not np.allclose(states(fe, ids)[:, 0], states(fe, changed)[:, 0])


def test_gbst_is_encoder_only():
    with pytest.raises(UsageError):
        make("gbst", 3, decoder=True)


def test_direct_cannot_downsample():
    with pytest.raises(UsageError):
        FrontendConfig("direct", 3)


def test_unknown_variant():
    with pytest.raises(UsageError):
        FrontendConfig("charformer", 2)


def test_out_of_range_ids():
    with pytest.raises(UsageError):
        make("lee", 3)(np.array([[4, VOCAB]]))


def test_pad_block_and_mask():
    ids = np.array([[4, 5, 6, 7]])
    padded = pad_block(ids, 3)
    assert padded.tolist() == [[4, 5, 6, 7, PAD, PAD]]
    assert block_mask(padded != PAD, 3).tolist() == [[True, True]]


def test_block_average_matrix_rows_are_means():
    mask = np.array([[True, True, True, True, False, False]])
    m = block_average_matrix(mask, 3, np.float64)[0]
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
    np.testing.assert_allclose(m[4], [0, 0, 0, 1, 0, 0])


def test_canine_span_defaults():
    cfg = FrontendConfig("canine", 3)
    assert cfg.span_for(decoder=False) == 12
    assert cfg.span_for(decoder=True) == 3
    assert FrontendConfig("canine", 3, canine_span=7).span_for(True) == 7
