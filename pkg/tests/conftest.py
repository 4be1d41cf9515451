import itertools

import numpy as np
import pytest

from avsd import diffcore as dc
from avsd import synth
from avsd.data import EOS_ID, Round
from avsd.decoder import Decoder, decode_step
from avsd.layers import Embedding, Linear, LstmStack, init_params
from avsd.model import DialogModel, ModelConfig


def tiny_config(modalities=(("a", 5), ("b", 3)), fusion="attentional", vocab_size=12) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        embed_dim=4,
        enc_cells=4,
        dec_cells=4,
        proj_dim=6,
        att_dim=5,
        modalities=tuple(modalities),
        fusion=fusion,
    )


def randomize(params, rng, scale=0.5):
    for t in params.values():
        t.data[...] = rng.normal(0.0, scale, size=t.shape).astype(t.data.dtype)
    return params


def tiny_rounds():
    return [
        Round("v", 0, [], [4, 5, 6], [7, 8, 0]),
        Round("v", 1, [[2, 4, 5, 3, 7, 0]], [6, 5], [9, 0]),
    ]


def tiny_features(rng, modalities=(("a", 5), ("b", 3)), T=3):
    return {m: rng.normal(size=(T, d)) for m, d in modalities}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with dc.precision(np.float64):
        yield


@pytest.fixture
def tiny_model():
    return DialogModel(tiny_config())


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    return synth.write_corpus(out, synth.SynthConfig())


def make_decoder(V=5, ctx_dim=3, embed_dim=3, cells=4, layers=2) -> Decoder:
    return Decoder(
        Embedding("embed", V, embed_dim),
        LstmStack("decoder_lstm", embed_dim + ctx_dim, cells, layers),
        Linear("output", cells, V),
    )


def decoder_params(dec, rng, scale=1.0):
    specs = dec.embed.specs() + dec.lstm.specs() + dec.out.specs()
    return randomize(init_params(specs, rng), rng, scale)


def enumerate_sequences(V, max_len, eos=0):
    """Every terminal output: ends at its first <eos>, or runs to max_len without one."""
    out = []
    for n in range(1, max_len + 1):
        out.extend(list(body) + [eos] for body in itertools.product(range(1, V), repeat=n - 1))
    out.extend(list(seq) for seq in itertools.product(range(1, V), repeat=max_len))
    return out


def sequence_log_prob(dec, params, g_n, tokens):
    """Sum of per-step log-probabilities, starting from <eos>."""
    total, prev, state = 0.0, EOS_ID, None
    with dc.no_grad():
        for y in tokens:
            lp, state = decode_step(dec, params, prev, g_n, state)
            total += float(lp.data[y])
            prev = y
    return total
