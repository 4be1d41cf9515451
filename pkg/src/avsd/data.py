"""Dialog JSON, vocabulary, tokenization and MMF1 feature files."""

from __future__ import annotations

import json
import string
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EOS, UNK, USER, SYSTEM = "<eos>", "<unk>", "<U>", "<S>"
SPECIALS = (EOS, UNK, USER, SYSTEM)
EOS_ID, UNK_ID, USER_ID, SYSTEM_ID = 0, 1, 2, 3

MAX_ROUNDS = 10

# Declared feature widths: I3D Mixed_5c pooled, VGGish embeddings, 20 stacked 13-dim MFCC frames.
MODALITY_DIMS = {"i3d_rgb": 1024, "i3d_flow": 1024, "vggish": 128, "mfcc": 260}

MMF_MAGIC = b"MMF1"
_HEADER = struct.Struct("<4sII")


class SchemaError(ValueError):
    pass


class FormatError(ValueError):
    pass


class DataError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# tokenization

_PUNCT = set(string.punctuation)


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, peel ASCII punctuation off token edges."""
    out: list[str] = []
    for raw in text.lower().split():
        start, end = 0, len(raw)
        while start < end and raw[start] in _PUNCT:
            start += 1
        while end > start and raw[end - 1] in _PUNCT:
            end -= 1
        out.extend(raw[:start])
        if start < end:
            out.append(raw[start:end])
        out.extend(raw[end:])
    return out


def detokenize(tokens: Sequence[str]) -> str:
    """Join with spaces, gluing punctuation tokens to the preceding word."""
    words: list[str] = []
    for tok in tokens:
        if tok in SPECIALS:
            continue
        if words and len(tok) == 1 and tok in _PUNCT:
            words[-1] += tok
        else:
            words.append(tok)
    return " ".join(words)


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]


def build_vocab(examples: Sequence["DialogExample"], min_count: int = 2) -> Vocabulary:
    """Specials first, then tokens with count >= min_count by (-count, token)."""
    if not examples:
        raise ValueError("cannot build a vocabulary from an empty training set")
    counts: Counter[str] = Counter()
    for ex in examples:
        if ex.caption:
            counts.update(tokenize(ex.caption))
        for q, a in ex.rounds:
            counts.update(tokenize(q))
            counts.update(tokenize(a))
    kept = sorted((t for t, n in counts.items() if n >= min_count and t not in SPECIALS), key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + kept)


# ---------------------------------------------------------------------------
# dialogs


@dataclass
class DialogExample:
    video_id: str
    rounds: list[tuple[str, str]]
    caption: str | None = None


@dataclass
class DatasetSplit:
    examples: list[DialogExample]
    role: str = "train"

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def by_id(self) -> dict[str, DialogExample]:
        return {ex.video_id: ex for ex in self.examples}


def _fail(where: str, msg: str) -> None:
    raise SchemaError(f"{where}: {msg}")


def parse_dialogs(doc, source: str = "<input>") -> list[DialogExample]:
    if not isinstance(doc, dict) or not isinstance(doc.get("dialogs"), list):
        _fail(source, 'top level must be an object with a "dialogs" list')
    examples = []
    seen: set[str] = set()
    for i, d in enumerate(doc["dialogs"]):
        where = f"{source}: dialogs[{i}]"
        if not isinstance(d, dict):
            _fail(where, "dialog entry must be an object")
        vid = d.get("image_id")
        if not isinstance(vid, str) or not vid:
            _fail(where, 'field "image_id" must be a non-empty string')
        where = f"{where} (image_id={vid!r})"
        if vid in seen:
            _fail(where, "duplicate image_id")
        seen.add(vid)
        caption = d.get("caption")
        if caption is not None and not isinstance(caption, str):
            _fail(where, 'field "caption" must be a string or null')
        turns = d.get("dialog")
        if not isinstance(turns, list) or not turns:
            _fail(where, 'field "dialog" must be a non-empty list')
        if len(turns) > MAX_ROUNDS:
            _fail(where, f"{len(turns)} rounds exceeds the maximum of {MAX_ROUNDS}")
        rounds = []
        for j, t in enumerate(turns):
            if not isinstance(t, dict):
                _fail(f"{where}.dialog[{j}]", "round must be an object")
            for key in ("question", "answer"):
                val = t.get(key)
                if not isinstance(val, str):
                    _fail(f"{where}.dialog[{j}]", f'field "{key}" must be a string')
                if not tokenize(val):
                    _fail(f"{where}.dialog[{j}]", f'field "{key}" is empty after tokenization')
            rounds.append((t["question"], t["answer"]))
        examples.append(DialogExample(vid, rounds, caption))
    return examples


def load_dialogs(path, role: str = "train") -> DatasetSplit:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return DatasetSplit(parse_dialogs(doc, str(path)), role)


def dialogs_to_json(examples: Iterable[DialogExample]) -> str:
    doc = {
        "dialogs": [
            {
                "image_id": ex.video_id,
                "caption": ex.caption,
                "dialog": [{"question": q, "answer": a} for q, a in ex.rounds],
            }
            for ex in examples
        ]
    }
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def write_dialogs(path, examples: Iterable[DialogExample]) -> None:
    Path(path).write_text(dialogs_to_json(examples), encoding="utf-8")


# ---------------------------------------------------------------------------
# training rounds


@dataclass
class Round:
    video_id: str
    index: int
    history: list[list[int]]  # one token sequence per earlier pair, caption first if used
    question: list[int]
    answer: list[int]  # ends with <eos>


def encode_pair(question: str, answer: str, vocab: Vocabulary) -> list[int]:
    return [USER_ID] + vocab.encode(tokenize(question)) + [SYSTEM_ID] + vocab.encode(tokenize(answer))


def make_rounds(example: DialogExample, vocab: Vocabulary, use_caption: bool = False) -> list[Round]:
    prefix: list[list[int]] = []
    if use_caption and example.caption and tokenize(example.caption):
        prefix.append(vocab.encode(tokenize(example.caption)))
    pairs = [encode_pair(q, a, vocab) for q, a in example.rounds]
    out = []
    for n, (q, a) in enumerate(example.rounds):
        out.append(
            Round(
                video_id=example.video_id,
                index=n,
                history=prefix + pairs[:n],
                question=vocab.encode(tokenize(q)),
                answer=vocab.encode(tokenize(a)) + [EOS_ID],
            )
        )
    return out


# ---------------------------------------------------------------------------
# MMF1 feature files


@dataclass
class FeatureSequence:
    video_id: str
    modality: str
    matrix: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return self.matrix.shape[0]

    @property
    def D(self) -> int:
        return self.matrix.shape[1]


def encode_mmf(matrix: np.ndarray) -> bytes:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise FormatError(f"feature matrix must be 2-D, got shape {m.shape}")
    return _HEADER.pack(MMF_MAGIC, m.shape[0], m.shape[1]) + np.ascontiguousarray(m, dtype="<f4").tobytes()


def decode_mmf(buf: bytes, expected_dim: int | None = None, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{source}: truncated header at byte offset {len(buf)} (need {_HEADER.size} bytes)")
    magic, T, D = _HEADER.unpack_from(buf, 0)
    if magic != MMF_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r} at byte offset 0")
    if T < 1 or D < 1:
        raise FormatError(f"{source}: empty matrix T={T} D={D} at byte offset 4")
    if expected_dim is not None and D != expected_dim:
        raise FormatError(f"{source}: dimension {D} at byte offset 8, expected {expected_dim}")
    need = _HEADER.size + 4 * T * D
    if len(buf) < need:
        raise FormatError(f"{source}: truncated payload at byte offset {len(buf)}, expected {need} bytes")
    if len(buf) > need:
        raise FormatError(f"{source}: {len(buf) - need} trailing bytes after byte offset {need}")
    m = np.frombuffer(buf, dtype="<f4", count=T * D, offset=_HEADER.size).reshape(T, D).astype(np.float32)
    if not np.isfinite(m).all():
        bad = int(np.argmax(~np.isfinite(m.reshape(-1))))
        raise FormatError(f"{source}: non-finite value at byte offset {_HEADER.size + 4 * bad}")
    return m


def feature_path(root, video_id: str, modality: str) -> Path:
    return Path(root) / modality / f"{video_id}.mmf"


def stats_path(root, modality: str) -> Path:
    return Path(root) / f"{modality}.mean.mmf"


def write_features(root, video_id: str, modality: str, matrix: np.ndarray) -> Path:
    path = feature_path(root, video_id, modality)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_mmf(matrix))
    return path


def modality_dim(modality: str, dims: dict[str, int] | None = None) -> int | None:
    if dims and modality in dims:
        return dims[modality]
    return MODALITY_DIMS.get(modality)


def read_features(
    root,
    video_id: str,
    modality: str,
    dim: int | None = None,
    normalize: bool = False,
) -> FeatureSequence:
    """Read one MMF1 matrix; optionally subtract the train mean and unit-normalize rows."""
    path = feature_path(root, video_id, modality)
    if not path.is_file():
        raise DataError(f"missing {modality} features for video {video_id!r} ({path})")
    expected = dim if dim is not None else MODALITY_DIMS.get(modality)
    m = decode_mmf(path.read_bytes(), expected, str(path))
    if normalize:
        spath = stats_path(root, modality)
        if not spath.is_file():
            raise DataError(f"normalization requested but {spath} is missing for modality {modality}")
        mean = decode_mmf(spath.read_bytes(), m.shape[1], str(spath))[0]
        m = normalize_rows(m - mean)
    return FeatureSequence(video_id, modality, m)


def normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m.astype(np.float64), axis=1, keepdims=True)
    return (m / np.maximum(norms, 1e-12)).astype(np.float32)


def write_feature_stats(root, modality: str, video_ids: Iterable[str], dim: int | None = None) -> np.ndarray:
    """Mean feature vector over all frames of the given (training) videos."""
    total = None
    count = 0
    for vid in video_ids:
        m = read_features(root, vid, modality, dim).matrix.astype(np.float64)
        total = m.sum(axis=0) if total is None else total + m.sum(axis=0)
        count += m.shape[0]
    if total is None:
        raise DataError(f"no videos to compute {modality} statistics from")
    mean = (total / count).astype(np.float32)
    stats_path(root, modality).write_bytes(encode_mmf(mean[None, :]))
    return mean


class FeatureStore:
    """Reads (and caches) every configured modality for a video."""

    def __init__(self, root, modalities: Sequence[tuple[str, int]], normalize: bool = False):
        self.root = Path(root) if root is not None else None
        self.modalities = list(modalities)
        self.normalize = normalize
        self._cache: dict[str, dict[str, np.ndarray]] = {}

    def load(self, video_id: str) -> dict[str, np.ndarray]:
        if not self.modalities:
            return {}
        if video_id not in self._cache:
            if self.root is None:
                names = ", ".join(m for m, _ in self.modalities)
                raise DataError(f"no features directory configured for modalities {names} (video {video_id!r})")
            self._cache[video_id] = {
                m: read_features(self.root, video_id, m, dim, self.normalize).matrix for m, dim in self.modalities
            }
        return self._cache[video_id]
