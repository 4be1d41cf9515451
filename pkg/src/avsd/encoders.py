"""Question, hierarchical history and per-modality temporal-attention encoders."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, Tensor, UsageError
from .layers import Embedding, LstmStack, ModelParams


@dataclass
class ModalityContext:
    modality: str
    context: Tensor  # c_k, shape (D_k,)
    weights: Tensor  # temporal attention over frames, shape (T_k,)


@dataclass
class TemporalAttentionParams:
    """Query map shared by all modalities; frame map and bias per modality."""

    W_query: Tensor  # (A, Hq)
    w_score: Tensor  # (A,)
    V_frame: Tensor  # (A, D_k)
    b: Tensor  # (A,)


def encode_question(tokens: Sequence[int], params: ModelParams, embed: Embedding, lstm: LstmStack) -> Tensor:
    """Final top-layer hidden state of the question LSTM."""
    if len(tokens) == 0:
        raise UsageError("cannot encode an empty question")
    h, _ = lstm.encode(params, embed.lookup_many(params, tokens))
    return h


def encode_pairs(
    pairs: Sequence[Sequence[int]], params: ModelParams, embed: Embedding, pair_lstm: LstmStack
) -> list[Tensor]:
    return [pair_lstm.encode(params, embed.lookup_many(params, p))[0] for p in pairs]


def summarize_history(
    pair_codes: Sequence[Tensor], params: ModelParams, summary_lstm: LstmStack
) -> list[Tensor]:
    """History encodings after 0, 1, ..., len(pair_codes) pairs (prefix folds)."""
    dtype = params[f"{summary_lstm.name}.l0.W"].dtype.type
    out = [Tensor(np.zeros(summary_lstm.cell_size, dtype))]
    state = None
    for code in pair_codes:
        h, state = summary_lstm.step(params, code, state)
        out.append(h)
    return out


def encode_history(
    pairs: Sequence[Sequence[int]],
    params: ModelParams,
    embed: Embedding,
    pair_lstm: LstmStack,
    summary_lstm: LstmStack,
) -> Tensor:
    """Two-level history code; zero vector for an empty history.

    ``pairs`` are already-formatted token sequences (``<U> q <S> a``), with the
    caption as the first pseudo pair when captions are used.
    """
    codes = encode_pairs(pairs, params, embed, pair_lstm)
    return summarize_history(codes, params, summary_lstm)[-1]


def attention_scores(frames: Tensor, query: Tensor, p: TemporalAttentionParams) -> Tensor:
    """``w^T tanh(W q + V x_t + b)`` for every frame ``t``; shape (T,)."""
    T = frames.shape[0]
    q = dc.affine(p.W_query, query, p.b)  # (A,)
    pre = dc.add(dc.matmul(frames, dc.transpose(p.V_frame)), dc.expand_rows(q, T))
    return dc.matmul(dc.tanh(pre), p.w_score)


def temporal_attend(modality: str, frames: Tensor, query: Tensor, p: TemporalAttentionParams) -> ModalityContext:
    """Additive attention over the frames of one modality, queried by the question code."""
    if frames.data.ndim != 2 or frames.shape[0] < 1:
        raise DimensionError(f"{modality}: expected a non-empty T x D frame matrix, got {frames.shape}")
    if frames.shape[1] != p.V_frame.shape[1]:
        raise DimensionError(f"{modality}: feature dim {frames.shape[1]}, attention expects {p.V_frame.shape[1]}")
    alpha = dc.softmax(attention_scores(frames, query, p))
    context = dc.matmul(alpha, frames)
    return ModalityContext(modality, context, alpha)


def project_modality(ctx: ModalityContext, W: Tensor, b: Tensor) -> Tensor:
    if ctx.context.shape != (W.shape[1],):
        raise DimensionError(f"{ctx.modality}: context {ctx.context.shape} does not match projection {W.shape}")
    return dc.affine(W, ctx.context, b)
