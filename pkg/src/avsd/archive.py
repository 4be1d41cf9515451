"""MMDM model archives: vocabulary, config echo and named float32 parameters.

Layout (all integers little-endian u32)::

    b"MMDM" | version | n_tokens | (len, utf8)*n_tokens | len, utf8 config text
    | n_params | per parameter: name len, utf8 name, rank, dims..., float32 payload
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import MODALITY_DIMS, Vocabulary
from .diffcore import Tensor
from .layers import ModelParams
from .model import DialogModel, ModelConfig

MAGIC = b"MMDM"
VERSION = 1
_U32 = struct.Struct("<I")


class ArchiveError(ValueError):
    pass


@dataclass
class ModelArchive:
    vocab: Vocabulary
    settings: dict[str, str]  # flat key -> value echo of the run configuration
    params: ModelParams

    @property
    def model_config(self) -> ModelConfig:
        return model_config_from_settings(self.settings, len(self.vocab))


def format_settings(settings: dict[str, str]) -> str:
    return "".join(f"{k} = {settings[k]}\n" for k in sorted(settings))


def parse_settings(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ArchiveError(f"config line without '=': {line!r}")
        out[key.strip()] = value.strip()
    return out


MODEL_KEYS = ("embed_dim", "enc_layers", "enc_cells", "dec_layers", "dec_cells", "proj_dim", "att_dim")


def format_modalities(modalities) -> str:
    return ",".join(f"{m}:{d}" for m, d in modalities)


def parse_modalities(text: str) -> tuple[tuple[str, int], ...]:
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        name, _, dim = item.partition(":")
        if dim:
            out.append((name, int(dim)))
        elif name in MODALITY_DIMS:
            out.append((name, MODALITY_DIMS[name]))
        else:
            raise ValueError(f"modality {name!r} needs an explicit dimension (name:dim)")
    return tuple(out)


def model_config_from_settings(settings: dict[str, str], vocab_size: int) -> ModelConfig:
    kwargs = {k: int(settings[k]) for k in MODEL_KEYS if k in settings}
    return ModelConfig(
        vocab_size=vocab_size,
        modalities=parse_modalities(settings.get("modalities", "")),
        fusion=settings.get("fusion", "attentional"),
        **kwargs,
    )


def _put_str(buf: bytearray, s: str) -> None:
    b = s.encode("utf-8")
    buf += _U32.pack(len(b))
    buf += b


def encode_archive(archive: ModelArchive) -> bytes:
    buf = bytearray(MAGIC)
    buf += _U32.pack(VERSION)
    buf += _U32.pack(len(archive.vocab))
    for tok in archive.vocab.itos:
        _put_str(buf, tok)
    _put_str(buf, format_settings(archive.settings))
    buf += _U32.pack(len(archive.params))
    for name, t in archive.params.items():
        _put_str(buf, name)
        buf += _U32.pack(t.data.ndim)
        for d in t.shape:
            buf += _U32.pack(d)
        buf += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    return bytes(buf)


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ArchiveError(f"{self.source}: truncated at byte offset {len(self.buf)} (needed {n} bytes at {self.pos})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def str(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode_archive(buf: bytes, source: str = "<archive>") -> ModelArchive:
    r = _Reader(buf, source)
    if r.take(4) != MAGIC:
        raise ArchiveError(f"{source}: not a model archive (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise ArchiveError(f"{source}: unsupported archive version {version}")
    vocab = Vocabulary([r.str() for _ in range(r.u32())])
    settings = parse_settings(r.str())
    params = ModelParams()
    for _ in range(r.u32()):
        name = r.str()
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        params.add(name, Tensor(data))
    if r.pos != len(buf):
        raise ArchiveError(f"{source}: {len(buf) - r.pos} trailing bytes at offset {r.pos}")
    archive = ModelArchive(vocab, settings, params)
    try:
        DialogModel(archive.model_config).check_params(params)
    except ValueError as exc:
        raise ArchiveError(f"{source}: {exc}") from None
    return archive


def save_archive(path, archive: ModelArchive) -> None:
    Path(path).write_bytes(encode_archive(archive))


def load_archive(path) -> ModelArchive:
    path = Path(path)
    if not path.is_file():
        raise ArchiveError(f"model archive {path} does not exist")
    return decode_archive(path.read_bytes(), str(path))
