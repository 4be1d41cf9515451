import json
import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avsd.data import (
    EOS_ID,
    SPECIALS,
    SYSTEM_ID,
    UNK_ID,
    USER_ID,
    DataError,
    DialogExample,
    FeatureStore,
    FormatError,
    SchemaError,
    Vocabulary,
    build_vocab,
    decode_mmf,
    detokenize,
    dialogs_to_json,
    encode_mmf,
    feature_path,
    load_dialogs,
    make_rounds,
    parse_dialogs,
    read_features,
    tokenize,
    write_dialogs,
    write_feature_stats,
    write_features,
)


def dialog_doc(*dialogs):
    return {"dialogs": list(dialogs)}


def dialog(vid="v1", rounds=1, caption=None):
    return {
        "image_id": vid,
        "caption": caption,
        "dialog": [{"question": f"question {i}?", "answer": f"answer number {i}."} for i in range(rounds)],
    }


# ---------------------------------------------------------------------------
# tokenization


@pytest.mark.parametrize(
    "text, tokens",
    [
        ("Was there audio?", ["was", "there", "audio", "?"]),
        ("", []),
        ("A man is singing.", ["a", "man", "is", "singing", "."]),
        ('"Hello," she said...', ['"', "hello", ",", '"', "she", "said", ".", ".", "."]),
        ("don't\tstop now", ["don't", "stop", "now"]),
        ("!!!", ["!", "!", "!"]),
    ],
)
def test_tokenize_examples(text, tokens):
    assert tokenize(text) == tokens


@given(st.text(max_size=40))
@settings(max_examples=200, deadline=None)
def test_tokenize_is_idempotent_and_nonempty(text):
    toks = tokenize(text)
    assert all(toks)
    assert tokenize(" ".join(toks)) == toks


def test_detokenize_glues_punctuation():
    assert detokenize(["yes", ",", "he", "does", ".", "<eos>"]) == "yes, he does."


# ---------------------------------------------------------------------------
# vocabulary


def test_vocab_frequency_ranking_matches_hand_count():
    ex = [DialogExample("v", [("b a c", "a b a"), ("d a", "e b c")])]
    # hand count: a=4, b=3, c=2, d=1, e=1
    vocab = build_vocab(ex, min_count=2)
    assert vocab.itos == list(SPECIALS) + ["a", "b", "c"]
    counts = Counter(t for q, a in ex[0].rounds for t in tokenize(q) + tokenize(a))
    expected = sorted((t for t in counts if counts[t] >= 2), key=lambda t: (-counts[t], t))
    assert vocab.itos[4:] == expected
    assert vocab.id("d") == UNK_ID
    assert build_vocab(ex, min_count=1).itos[4:] == ["a", "b", "c", "d", "e"]


def test_vocab_specials_only_and_deterministic():
    ex = [DialogExample("v", [("one two", "three four")])]
    assert build_vocab(ex).itos == list(SPECIALS)
    assert build_vocab(ex * 2) == build_vocab(ex * 2)


def test_vocab_ids_and_errors():
    assert (EOS_ID, UNK_ID, USER_ID, SYSTEM_ID) == (0, 1, 2, 3)
    with pytest.raises(ValueError):
        Vocabulary(["a", "b"])
    with pytest.raises(ValueError):
        Vocabulary(list(SPECIALS) + ["x", "x"])
    with pytest.raises(ValueError):
        build_vocab([])


def test_vocab_counts_caption_tokens():
    ex = [DialogExample("v", [("q", "a")], caption="kitchen kitchen")]
    assert "kitchen" in build_vocab(ex)


# ---------------------------------------------------------------------------
# dialog json


def test_minimal_file_loads(tmp_path):
    path = tmp_path / "d.json"
    path.write_text(json.dumps(dialog_doc(dialog())))
    split = load_dialogs(path)
    assert len(split) == 1
    assert split.examples[0].rounds == [("question 0?", "answer number 0.")]


@pytest.mark.parametrize(
    "doc, fragment",
    [
        (dialog_doc(dialog("v1"), dialog("v1")), "duplicate image_id"),
        (dialog_doc(dialog(rounds=11)), "exceeds the maximum"),
        (dialog_doc({"caption": None, "dialog": []}), "image_id"),
        (dialog_doc({"image_id": "v", "dialog": [{"question": "q?"}]}), '"answer"'),
        (dialog_doc({"image_id": "v", "dialog": [{"question": 3, "answer": "a"}]}), '"question"'),
        (dialog_doc({"image_id": "v", "dialog": [{"question": "?", "answer": " "}]}), "empty after tokenization"),
        (dialog_doc({"image_id": "v", "caption": 5, "dialog": [{"question": "q", "answer": "a"}]}), "caption"),
        ({"dialog": []}, "dialogs"),
    ],
)
def test_schema_errors(doc, fragment):
    with pytest.raises(SchemaError, match=fragment):
        parse_dialogs(doc)


def test_schema_error_names_the_dialog():
    with pytest.raises(SchemaError, match="bad-one"):
        parse_dialogs(dialog_doc(dialog("ok"), dialog("bad-one", rounds=12)))


def test_invalid_json_reports_position(tmp_path):
    path = tmp_path / "d.json"
    path.write_text('{"dialogs": [\n  {,}\n]}')
    with pytest.raises(SchemaError, match="line 2"):
        load_dialogs(path)


def test_ten_round_dialog_round_trips(tmp_path):
    doc = dialog_doc(dialog("v1", rounds=10, caption="a room."), dialog("v2", rounds=3))
    path = tmp_path / "d.json"
    path.write_text(json.dumps(doc))
    split = load_dialogs(path)
    assert [q for q, _ in split.examples[0].rounds] == [f"question {i}?" for i in range(10)]
    out = tmp_path / "again.json"
    write_dialogs(out, split.examples)
    assert json.loads(out.read_text()) == doc
    assert dialogs_to_json(load_dialogs(out).examples) == out.read_text()


# ---------------------------------------------------------------------------
# rounds


def test_make_rounds_history_and_tokens():
    ex = DialogExample("v", [(f"is it {i}?", f"it is {i}.") for i in range(10)], caption="a kitchen.")
    vocab = build_vocab([ex], min_count=1)
    rounds = make_rounds(ex, vocab)
    assert [len(r.history) for r in rounds] == list(range(10))
    for n, r in enumerate(rounds):
        q, a = ex.rounds[n]
        assert r.index == n
        assert r.question == vocab.encode(tokenize(q))
        assert r.answer == vocab.encode(tokenize(a)) + [EOS_ID]
        for k, pair in enumerate(r.history):
            pq, pa = ex.rounds[k]
            assert pair == [USER_ID] + vocab.encode(tokenize(pq)) + [SYSTEM_ID] + vocab.encode(tokenize(pa))
        assert all(0 <= t < len(vocab) for t in r.question + r.answer + sum(r.history, []))
    with_caption = make_rounds(ex, vocab, use_caption=True)
    assert with_caption[0].history == [vocab.encode(tokenize("a kitchen."))]
    assert [len(r.history) for r in with_caption] == list(range(1, 11))


def test_single_round_has_empty_history():
    ex = DialogExample("v", [("q?", "a.")])
    (r,) = make_rounds(ex, build_vocab([ex], min_count=1))
    assert r.history == []


def test_unknown_words_map_to_unk():
    ex = DialogExample("v", [("zebra?", "no.")])
    vocab = Vocabulary(list(SPECIALS) + ["no", "."])
    (r,) = make_rounds(ex, vocab)
    assert r.question == [UNK_ID, UNK_ID]


# ---------------------------------------------------------------------------
# MMF1 features


def test_mmf_one_by_two_example():
    buf = b"MMF1" + struct.pack("<II", 1, 2) + struct.pack("<ff", 1.0, 2.0)
    np.testing.assert_array_equal(decode_mmf(buf), [[1.0, 2.0]])
    assert encode_mmf(np.array([[1.0, 2.0]])) == buf


def test_mmf_truncated_payload_offset():
    buf = encode_mmf(np.ones((3, 4)))[:-5]
    with pytest.raises(FormatError, match=f"offset {len(buf)}, expected {12 + 48}"):
        decode_mmf(buf)
    with pytest.raises(FormatError, match="truncated header"):
        decode_mmf(b"MMF1\x01")


def test_mmf_bad_magic_and_dimension():
    buf = encode_mmf(np.ones((2, 3)))
    with pytest.raises(FormatError, match="bad magic"):
        decode_mmf(b"MMF2" + buf[4:])
    with pytest.raises(FormatError, match="offset 8, expected 4"):
        decode_mmf(buf, expected_dim=4)
    with pytest.raises(FormatError, match="trailing"):
        decode_mmf(buf + b"\0")
    with pytest.raises(FormatError, match="non-finite value at byte offset 16"):
        decode_mmf(encode_mmf(np.array([[1.0, np.nan, 0.0]])))
    with pytest.raises(FormatError):
        encode_mmf(np.ones(3))


def test_mmf_round_trip_is_bit_identical(tmp_path, rng):
    m = rng.normal(size=(7, 128)).astype(np.float32)
    path = write_features(tmp_path, "vid", "vggish", m)
    assert path == feature_path(tmp_path, "vid", "vggish")
    got = read_features(tmp_path, "vid", "vggish").matrix
    assert got.tobytes() == m.tobytes()
    assert encode_mmf(got) == path.read_bytes()


def test_read_features_checks_declared_dimension(tmp_path, rng):
    write_features(tmp_path, "vid", "vggish", rng.normal(size=(2, 64)))
    with pytest.raises(FormatError, match="expected 128"):
        read_features(tmp_path, "vid", "vggish")
    write_features(tmp_path, "vid", "custom", rng.normal(size=(2, 64)))
    assert read_features(tmp_path, "vid", "custom").D == 64


def test_normalization_gives_unit_rows(tmp_path, rng):
    for vid in ("a", "b"):
        write_features(tmp_path, vid, "vggish", rng.normal(3.0, 2.0, size=(5, 128)))
    mean = write_feature_stats(tmp_path, "vggish", ["a", "b"])
    raw = np.concatenate([read_features(tmp_path, v, "vggish").matrix for v in ("a", "b")])
    np.testing.assert_allclose(mean, raw.astype(np.float64).mean(axis=0), atol=1e-5)
    m = read_features(tmp_path, "a", "vggish", normalize=True).matrix
    np.testing.assert_allclose(np.linalg.norm(m.astype(np.float64), axis=1), 1.0, atol=1e-5)


def test_normalization_without_stats_is_an_error(tmp_path, rng):
    write_features(tmp_path, "a", "vggish", rng.normal(size=(2, 128)))
    with pytest.raises(DataError, match="vggish"):
        read_features(tmp_path, "a", "vggish", normalize=True)


def test_missing_feature_file_names_video_and_modality(tmp_path, rng):
    write_features(tmp_path, "a", "vggish", rng.normal(size=(2, 128)))
    store = FeatureStore(tmp_path, [("vggish", 128), ("i3d_rgb", 1024)])
    with pytest.raises(DataError) as err:
        store.load("a")
    assert "i3d_rgb" in str(err.value) and "'a'" in str(err.value)
    with pytest.raises(DataError, match="vggish"):
        FeatureStore(None, [("vggish", 128)]).load("a")
    assert FeatureStore(None, []).load("a") == {}


def test_feature_store_caches(tmp_path, rng):
    write_features(tmp_path, "a", "vggish", rng.normal(size=(2, 128)))
    store = FeatureStore(tmp_path, [("vggish", 128)])
    assert store.load("a") is store.load("a")
