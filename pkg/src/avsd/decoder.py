"""Context-conditioned answer decoder: teacher forcing, greedy and beam search."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .data import EOS_ID
from .diffcore import Tensor, UsageError
from .layers import Embedding, Linear, LstmStack, LstmState, ModelParams


@dataclass(frozen=True)
class Decoder:
    embed: Embedding
    lstm: LstmStack
    out: Linear

    @property
    def vocab_size(self) -> int:
        return self.out.out_dim

    @property
    def context_dim(self) -> int:
        return self.lstm.input_size - self.embed.embed_dim


@dataclass
class Hypothesis:
    tokens: list[int]
    log_prob: float
    state: LstmState | None = field(default=None, repr=False)
    finished: bool = False

    def score(self, length_norm: bool = False) -> float:
        if length_norm and self.tokens:
            return self.log_prob / len(self.tokens)
        return self.log_prob


def decode_logits(
    dec: Decoder, params: ModelParams, prev_token: int, g_n: Tensor, state: LstmState | None
) -> tuple[Tensor, LstmState]:
    x = dc.concat([dec.embed.lookup(params, prev_token), g_n])
    s, new_state = dec.lstm.step(params, x, state)
    return dec.out(params, s), new_state


def decode_step(
    dec: Decoder, params: ModelParams, prev_token: int, g_n: Tensor, state: LstmState | None = None
) -> tuple[Tensor, LstmState]:
    """Log-distribution over the next token given the previous one and the context.

    ``state=None`` starts from the all-zero decoder state.
    """
    logits, new_state = decode_logits(dec, params, prev_token, g_n, state)
    return dc.log_softmax(logits), new_state


def teacher_forced_loss(dec: Decoder, params: ModelParams, g_n: Tensor, targets: Sequence[int]) -> tuple[Tensor, int]:
    """Summed cross-entropy of ``targets`` (ending in <eos>) fed ground-truth prefixes.

    The first input token is <eos>, which doubles as the start symbol.
    """
    if len(targets) == 0:
        raise UsageError("teacher_forced_loss needs at least one target token")
    prev = EOS_ID
    state = None
    total = None
    for y in targets:
        logits, state = decode_logits(dec, params, prev, g_n, state)
        ce = dc.cross_entropy(logits, int(y))
        total = ce if total is None else dc.add(total, ce)
        prev = int(y)
    return total, len(targets)


def _ranked_tokens(log_probs: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -logp keeps the lower token id first among ties
    return np.argsort(-log_probs, kind="stable")[:k]


def greedy_decode(dec: Decoder, params: ModelParams, g_n: Tensor, max_len: int = 30) -> list[int]:
    """Argmax token at every step until <eos> (kept in the output) or ``max_len`` tokens."""
    if max_len < 1:
        raise UsageError("max_len must be >= 1")
    tokens: list[int] = []
    prev, state = EOS_ID, None
    with dc.no_grad():
        while len(tokens) < max_len:
            lp, state = decode_step(dec, params, prev, g_n, state)
            prev = int(_ranked_tokens(lp.data, 1)[0])
            tokens.append(prev)
            if prev == EOS_ID:
                break
    return tokens


def _rank_key(h: Hypothesis, length_norm: bool):
    return (-h.score(length_norm), len(h.tokens), h.tokens)


def beam_search(
    dec: Decoder,
    params: ModelParams,
    g_n: Tensor,
    beam_size: int = 5,
    max_len: int = 30,
    length_norm: bool = False,
) -> list[Hypothesis]:
    """Breadth-limited search over token sequences.

    Each step expands every live hypothesis by its top ``beam_size`` tokens and
    keeps the global top ``beam_size`` candidates. Candidates ending in <eos>
    retire to the result pool; hypotheses still live at ``max_len`` join the
    pool unfinished. Returns at most ``beam_size`` hypotheses, best first, ties
    broken by shorter length and then lexicographic token ids.
    """
    if beam_size < 1:
        raise UsageError("beam_size must be >= 1")
    if max_len < 1:
        raise UsageError("max_len must be >= 1")
    live = [Hypothesis([], 0.0)]
    pool: list[Hypothesis] = []
    with dc.no_grad():
        for _ in range(max_len):
            candidates = []
            for hyp in live:
                prev = hyp.tokens[-1] if hyp.tokens else EOS_ID
                lp, state = decode_step(dec, params, prev, g_n, hyp.state)
                lpd = lp.data
                for tok in _ranked_tokens(lpd, beam_size):
                    tok = int(tok)
                    candidates.append(
                        Hypothesis(hyp.tokens + [tok], hyp.log_prob + float(lpd[tok]), state, tok == EOS_ID)
                    )
            # every candidate has the same length here, so raw log-prob ranking suffices
            candidates.sort(key=lambda h: (-h.log_prob, h.tokens))
            live = []
            for cand in candidates[:beam_size]:
                (pool if cand.finished else live).append(cand)
            if not live:
                break
        pool.extend(live)
    pool.sort(key=lambda h: _rank_key(h, length_norm))
    return pool[:beam_size]
