import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avsd import diffcore as dc
from avsd.diffcore import DimensionError, Tensor, UsageError
from avsd.encoders import ModalityContext
from avsd.fusion import (
    ConfigurationError,
    FusionParams,
    attentional_fuse,
    modality_scores,
    naive_fuse,
)

A, HQ, PROJ = 4, 3, 6


def t32(a):
    return Tensor(np.asarray(a, dtype=np.float32))


def make_case(rng, dims=(5, 2, 3), scale=1.0):
    names = [f"m{k}" for k in range(len(dims))]
    contexts = [ModalityContext(m, t32(rng.normal(size=D)), t32([1.0])) for m, D in zip(names, dims)]
    d = [t32(rng.normal(size=PROJ)) for _ in dims]
    p = FusionParams(
        t32(rng.normal(0, scale, (A, HQ))),
        t32(rng.normal(0, scale, A)),
        {m: t32(rng.normal(0, scale, (A, D))) for m, D in zip(names, dims)},
        {m: t32(rng.normal(0, scale, A)) for m in names},
    )
    return t32(rng.normal(size=HQ)), contexts, d, p


def score_oracle(g_q, contexts, p):
    f = lambda t: np.asarray(t.data, np.float64)  # noqa: E731
    return np.array(
        [f(p.w_B) @ np.tanh(f(p.W_B) @ f(g_q) + f(p.V_B[c.modality]) @ f(c.context) + f(p.b_B[c.modality])) for c in contexts]
    )


def test_naive_single_modality_is_tanh(rng):
    v = t32(rng.normal(size=PROJ))
    out = naive_fuse([v])
    np.testing.assert_array_equal(out.g_av.data, np.tanh(v.data))
    np.testing.assert_array_equal(out.beta, [1.0])


def test_naive_cancellation(rng):
    v = rng.normal(size=PROJ).astype(np.float32)
    np.testing.assert_array_equal(naive_fuse([t32(v), t32(-v)]).g_av.data, 0)


def test_naive_matches_float64_oracle(rng):
    d = [rng.normal(size=PROJ) for _ in range(3)]
    out = naive_fuse([t32(x) for x in d])
    np.testing.assert_allclose(out.g_av.data, np.tanh(sum(d)), atol=1e-5)
    np.testing.assert_array_equal(out.beta, np.ones(3))


def test_naive_errors(rng):
    with pytest.raises(UsageError):
        naive_fuse([])
    with pytest.raises(DimensionError):
        naive_fuse([t32(np.zeros(3)), t32(np.zeros(4))])


def test_scores_zero_w_and_symmetry(rng):
    g_q, contexts, d, p = make_case(rng)
    p.w_B.data[...] = 0
    np.testing.assert_array_equal(modality_scores(g_q, contexts, p).data, 0)

    g_q, contexts, d, p = make_case(rng, dims=(4, 4))
    contexts[1] = ModalityContext("m1", contexts[0].context, contexts[0].weights)
    p.V_B["m1"], p.b_B["m1"] = p.V_B["m0"], p.b_B["m0"]
    s = modality_scores(g_q, contexts, p).data
    assert s[0] == s[1]


def test_scores_match_float64_oracle(rng):
    g_q, contexts, d, p = make_case(rng)
    np.testing.assert_allclose(modality_scores(g_q, contexts, p).data, score_oracle(g_q, contexts, p), atol=1e-5)


def test_scores_reject_unknown_modality(rng):
    g_q, contexts, d, p = make_case(rng)
    contexts[0] = ModalityContext("other", contexts[0].context, contexts[0].weights)
    with pytest.raises(ConfigurationError):
        modality_scores(g_q, contexts, p)
    with pytest.raises(ConfigurationError):
        attentional_fuse(g_q, contexts[:2], d, p)


def test_attentional_single_modality_is_naive(rng):
    g_q, contexts, d, p = make_case(rng, dims=(5,))
    out = attentional_fuse(g_q, contexts, d, p)
    np.testing.assert_array_equal(out.beta, [1.0])
    np.testing.assert_allclose(out.g_av.data, naive_fuse(d).g_av.data, atol=1e-6)


def test_attentional_equal_scores_give_uniform_beta(rng):
    g_q, contexts, d, p = make_case(rng)
    p.w_B.data[...] = 0
    out = attentional_fuse(g_q, contexts, d, p)
    np.testing.assert_allclose(out.beta, 1 / 3, atol=1e-7)
    expected = np.tanh(sum(np.asarray(x.data, np.float64) for x in d) / 3)
    np.testing.assert_allclose(out.g_av.data, expected, atol=1e-6)


def test_attentional_matches_float64_oracle(rng):
    g_q, contexts, d, p = make_case(rng)
    s = score_oracle(g_q, contexts, p)
    beta = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
    out = attentional_fuse(g_q, contexts, d, p)
    np.testing.assert_allclose(out.beta, beta, atol=1e-6)
    np.testing.assert_allclose(out.g_av.data, np.tanh(sum(b * x.data for b, x in zip(beta, d))), atol=1e-5)


def test_beta_override_ones_is_bit_identical_to_naive(rng):
    for _ in range(20):
        g_q, contexts, d, p = make_case(rng)
        out = attentional_fuse(g_q, contexts, d, p, beta_override=np.ones(3))
        np.testing.assert_array_equal(out.g_av.data, naive_fuse(d).g_av.data)


def test_beta_override_shape_checked(rng):
    g_q, contexts, d, p = make_case(rng)
    with pytest.raises(DimensionError):
        attentional_fuse(g_q, contexts, d, p, beta_override=np.ones(2))


@given(st.integers(1, 5), st.floats(-20, 20), st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_beta_normalized_positive_and_shift_invariant(K, shift, seed):
    rng = np.random.default_rng(seed)
    g_q, contexts, d, p = make_case(rng, dims=tuple(rng.integers(1, 6, size=K)), scale=0.7)
    out = attentional_fuse(g_q, contexts, d, p)
    b = out.beta.astype(np.float64)
    assert (b > 0).all()
    assert abs(b.sum() - 1.0) <= 1e-6
    assert (np.abs(out.g_av.data) <= 1).all()
    scores = modality_scores(g_q, contexts, p).data
    shifted = dc.softmax(t32(scores + np.float32(shift))).data
    np.testing.assert_allclose(shifted, dc.softmax(t32(scores)).data, atol=1e-6)


def test_fusion_gradcheck(rng, f64):
    g_q, contexts, d, p = make_case(rng)
    leaves = [Tensor(x.data.astype(np.float64), requires_grad=True) for x in [g_q] + d]
    g_q, d = leaves[0], leaves[1:]
    ctx_leaves = [Tensor(c.context.data.astype(np.float64), requires_grad=True) for c in contexts]
    contexts = [ModalityContext(c.modality, t, c.weights) for c, t in zip(contexts, ctx_leaves)]
    p = FusionParams(
        Tensor(p.W_B.data.astype(np.float64), requires_grad=True),
        Tensor(p.w_B.data.astype(np.float64), requires_grad=True),
        {m: Tensor(v.data.astype(np.float64), requires_grad=True) for m, v in p.V_B.items()},
        {m: Tensor(v.data.astype(np.float64), requires_grad=True) for m, v in p.b_B.items()},
    )
    w = Tensor(rng.normal(size=PROJ))
    params = leaves + ctx_leaves + [p.W_B, p.w_B, *p.V_B.values(), *p.b_B.values()]
    assert dc.gradcheck(lambda: dc.sum(dc.mul(attentional_fuse(g_q, contexts, d, p).g_av, w)), params) < 1e-3
