import numpy as np
import pytest

from avsd import diffcore as dc
from avsd.data import EOS_ID, Round
from avsd.layers import ModelParams
from avsd.model import DialogModel, ModelConfig

from conftest import randomize, tiny_config, tiny_features, tiny_rounds


def test_context_dim():
    assert tiny_config().context_dim == 4 + 6 + 4
    assert tiny_config(modalities=()).context_dim == 8
    big = ModelConfig(vocab_size=100, modalities=(("i3d_rgb", 1024), ("vggish", 128)))
    assert big.context_dim == 128 + 256 + 128


def test_config_validation_and_dict_round_trip():
    with pytest.raises(ValueError):
        tiny_config(fusion="sum")
    with pytest.raises(ValueError):
        tiny_config(modalities=(("a", 2), ("a", 3)))
    cfg = tiny_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_parameter_layout_by_variant():
    qa = set(DialogModel(tiny_config(modalities=())).init_params(0).names())
    naive = set(DialogModel(tiny_config(fusion="naive")).init_params(0).names())
    att = set(DialogModel(tiny_config()).init_params(0).names())
    assert not any(n.startswith(("temporal.", "proj.", "fusion.")) for n in qa)
    assert qa < naive < att
    assert att - naive == {"fusion.W_B", "fusion.w_B", "fusion.a.V", "fusion.a.b", "fusion.b.V", "fusion.b.b"}


def test_check_params_reports_mismatch():
    model = DialogModel(tiny_config())
    params = model.init_params(0)
    model.check_params(params)
    with pytest.raises(ValueError, match="missing"):
        DialogModel(tiny_config(modalities=(("a", 5), ("b", 3), ("c", 2)))).check_params(params)


def test_init_is_seeded():
    model = DialogModel(tiny_config())
    assert model.init_params(3).equal(model.init_params(3))
    assert not model.init_params(3).equal(model.init_params(4))


def test_round_context_layout(rng):
    model = DialogModel(tiny_config())
    params = randomize(model.init_params(0), rng)
    feats = tiny_features(rng)
    (ctx,) = model.encode_rounds(params, tiny_rounds()[:1], feats)
    assert ctx.g_n.shape == (14,)
    # no history: the last enc_cells entries are zero
    np.testing.assert_array_equal(ctx.g_n.data[-4:], 0)
    assert ctx.beta.shape == (2,)
    assert abs(float(ctx.beta.sum()) - 1) <= 1e-6
    for c in ctx.contexts:
        assert abs(float(c.weights.data.sum()) - 1) <= 1e-6


def test_shared_prefix_encoding_matches_separate(rng):
    model = DialogModel(tiny_config())
    params = randomize(model.init_params(0), rng)
    feats = tiny_features(rng)
    pairs = [[2, 4, 5, 3, 6], [2, 7, 3, 8, 9], [2, 10, 3, 11]]
    rounds = [Round("v", n, pairs[:n], [4 + n, 5], [6, EOS_ID]) for n in range(4)]
    together = model.encode_rounds(params, rounds, feats)
    for r, ctx in zip(rounds, together):
        (alone,) = model.encode_rounds(params, [r], feats)
        np.testing.assert_array_equal(ctx.g_n.data, alone.g_n.data)
    # non-prefix histories take the per-round path and still agree
    mixed = [rounds[2], Round("v", 1, [pairs[1]], [4], [EOS_ID])]
    for r, ctx in zip(mixed, model.encode_rounds(params, mixed, feats)):
        np.testing.assert_array_equal(ctx.g_n.data, model.encode_rounds(params, [r], feats)[0].g_n.data)


def test_beta_override_ones_matches_naive_model(rng):
    att = DialogModel(tiny_config())
    naive = DialogModel(tiny_config(fusion="naive"))
    params = randomize(att.init_params(0), rng)
    shared = ModelParams()
    for name in naive.init_params(0).names():
        shared.add(name, params[name])
    feats = tiny_features(rng)
    a = att.encode_rounds(params, tiny_rounds(), feats, beta_override=np.ones(2))
    b = naive.encode_rounds(shared, tiny_rounds(), feats)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.g_n.data, y.g_n.data)


def test_missing_modality_features(rng):
    model = DialogModel(tiny_config())
    with pytest.raises(KeyError, match="'b'"):
        model.encode_rounds(model.init_params(0), tiny_rounds(), {"a": rng.normal(size=(3, 5))})


def test_qa_only_ignores_features(rng):
    model = DialogModel(tiny_config(modalities=()))
    params = model.init_params(0)
    a = model.encode_rounds(params, tiny_rounds())
    b = model.encode_rounds(params, tiny_rounds(), tiny_features(rng))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.g_n.data, y.g_n.data)
        assert x.beta is None


def test_dialog_loss_counts_tokens(rng):
    model = DialogModel(tiny_config())
    loss, n = model.dialog_loss(model.init_params(0), tiny_rounds(), tiny_features(rng))
    assert n == 5
    assert loss.item() > 0


@pytest.mark.parametrize("fusion", ["naive", "attentional"])
def test_full_pipeline_gradcheck(rng, f64, fusion):
    model = DialogModel(tiny_config(fusion=fusion))
    params = randomize(model.init_params(0), rng).astype(np.float64)
    feats = tiny_features(rng)
    err = dc.gradcheck(lambda: model.dialog_loss(params, tiny_rounds(), feats)[0], list(params.values()))
    assert err < 1e-3


def test_generate_returns_top_hypothesis(rng):
    model = DialogModel(tiny_config())
    params = randomize(model.init_params(0), rng)
    (ctx,) = model.encode_rounds(params, tiny_rounds()[:1], tiny_features(rng))
    hyp = model.generate(params, ctx, beam_size=3, max_len=6)
    assert 1 <= len(hyp.tokens) <= 6
