"""Assembles encoders, fusion and decoder into the video dialog model."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .data import Round
from .decoder import Decoder, Hypothesis, beam_search, teacher_forced_loss
from .diffcore import Tensor
from .encoders import (
    ModalityContext,
    TemporalAttentionParams,
    encode_pairs,
    encode_question,
    project_modality,
    summarize_history,
    temporal_attend,
)
from .fusion import FUSION_MODES, FusionParams, attentional_fuse, naive_fuse
from .layers import Embedding, Linear, LstmStack, ModelParams, ParamSpec, init_params


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 256
    enc_layers: int = 2
    enc_cells: int = 128
    dec_layers: int = 2
    dec_cells: int = 128
    proj_dim: int = 256
    att_dim: int = 128
    modalities: tuple[tuple[str, int], ...] = ()
    fusion: str = "attentional"

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        names = [m for m, _ in self.modalities]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate modality in {names}")

    @property
    def modality_names(self) -> list[str]:
        return [m for m, _ in self.modalities]

    @property
    def context_dim(self) -> int:
        av = self.proj_dim if self.modalities else 0
        return self.enc_cells + av + self.enc_cells

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = [list(m) for m in self.modalities]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        d["modalities"] = tuple((str(m), int(k)) for m, k in d.get("modalities", ()))
        return cls(**d)


@dataclass
class RoundContext:
    g_n: Tensor
    beta: np.ndarray | None = None
    contexts: list[ModalityContext] = field(default_factory=list)


class DialogModel:
    """Parameter layout plus the forward computations over a ``ModelParams``."""

    def __init__(self, config: ModelConfig):
        c = config
        self.config = c
        self.embed = Embedding("embed", c.vocab_size, c.embed_dim)
        self.question_lstm = LstmStack("question_lstm", c.embed_dim, c.enc_cells, c.enc_layers)
        self.pair_lstm = LstmStack("pair_lstm", c.embed_dim, c.enc_cells, c.enc_layers)
        self.summary_lstm = LstmStack("summary_lstm", c.enc_cells, c.enc_cells, c.enc_layers)
        self.projections = {m: Linear(f"proj.{m}", dim, c.proj_dim) for m, dim in c.modalities}
        self.decoder = Decoder(
            self.embed,
            LstmStack("decoder_lstm", c.embed_dim + c.context_dim, c.dec_cells, c.dec_layers),
            Linear("output", c.dec_cells, c.vocab_size),
        )

    # -- parameters ---------------------------------------------------------

    def specs(self) -> list[ParamSpec]:
        c = self.config
        out = self.embed.specs() + self.question_lstm.specs() + self.pair_lstm.specs() + self.summary_lstm.specs()
        if c.modalities:
            out.append(ParamSpec("temporal.W_query", (c.att_dim, c.enc_cells)))
            out.append(ParamSpec("temporal.w_score", (c.att_dim,)))
            for m, dim in c.modalities:
                out.append(ParamSpec(f"temporal.{m}.V", (c.att_dim, dim)))
                out.append(ParamSpec(f"temporal.{m}.b", (c.att_dim,), "bias"))
            for m in c.modality_names:
                out.extend(self.projections[m].specs())
            if c.fusion == "attentional":
                out.append(ParamSpec("fusion.W_B", (c.att_dim, c.enc_cells)))
                out.append(ParamSpec("fusion.w_B", (c.att_dim,)))
                for m, dim in c.modalities:
                    out.append(ParamSpec(f"fusion.{m}.V", (c.att_dim, dim)))
                    out.append(ParamSpec(f"fusion.{m}.b", (c.att_dim,), "bias"))
        out += self.decoder.lstm.specs() + self.decoder.out.specs()
        return out

    def init_params(self, seed: int | np.random.Generator = 0) -> ModelParams:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return init_params(self.specs(), rng)

    def check_params(self, params: ModelParams) -> None:
        expected = {s.name: s.shape for s in self.specs()}
        got = {k: t.shape for k, t in params.items()}
        if expected != got:
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            wrong = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
            raise ValueError(f"parameters do not match config: missing={missing} extra={extra} wrong_shape={wrong}")

    def temporal_params(self, params: ModelParams, m: str) -> TemporalAttentionParams:
        return TemporalAttentionParams(
            params["temporal.W_query"], params["temporal.w_score"], params[f"temporal.{m}.V"], params[f"temporal.{m}.b"]
        )

    def fusion_params(self, params: ModelParams) -> FusionParams:
        names = self.config.modality_names
        return FusionParams(
            params["fusion.W_B"],
            params["fusion.w_B"],
            {m: params[f"fusion.{m}.V"] for m in names},
            {m: params[f"fusion.{m}.b"] for m in names},
        )

    # -- encoding -----------------------------------------------------------

    def audio_visual(
        self,
        params: ModelParams,
        g_q: Tensor,
        frames: Mapping[str, Tensor],
        beta_override: np.ndarray | None = None,
    ) -> tuple[Tensor, np.ndarray, list[ModalityContext]]:
        contexts, projected = [], []
        for m in self.config.modality_names:
            ctx = temporal_attend(m, frames[m], g_q, self.temporal_params(params, m))
            contexts.append(ctx)
            proj = self.projections[m]
            projected.append(project_modality(ctx, params[f"{proj.name}.W"], params[f"{proj.name}.b"]))
        if self.config.fusion == "naive":
            out = naive_fuse(projected)
        else:
            out = attentional_fuse(g_q, contexts, projected, self.fusion_params(params), beta_override)
        return out.g_av, out.beta, contexts

    def frames_to_tensors(self, params: ModelParams, features: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        dtype = params["embed.weight"].dtype
        out = {}
        for m in self.config.modality_names:
            if m not in features:
                raise KeyError(f"missing features for modality {m!r}")
            out[m] = Tensor(np.asarray(features[m], dtype=dtype))
        return out

    def encode_rounds(
        self,
        params: ModelParams,
        rounds: Sequence[Round],
        features: Mapping[str, np.ndarray] | None = None,
        beta_override: np.ndarray | None = None,
    ) -> list[RoundContext]:
        """Context vectors ``[g_q; g_av; g_h]`` for rounds of one dialog.

        History pair codes and summary folds are shared between rounds whose
        histories are prefixes of the longest one.
        """
        if not rounds:
            return []
        frames = self.frames_to_tensors(params, features or {})
        longest = max((r.history for r in rounds), key=len)
        if all(r.history == longest[: len(r.history)] for r in rounds):
            codes = encode_pairs(longest, params, self.embed, self.pair_lstm)
            summaries = summarize_history(codes, params, self.summary_lstm)
            histories = [summaries[len(r.history)] for r in rounds]
        else:
            histories = [
                summarize_history(encode_pairs(r.history, params, self.embed, self.pair_lstm), params, self.summary_lstm)[-1]
                for r in rounds
            ]
        out = []
        for r, g_h in zip(rounds, histories):
            g_q = encode_question(r.question, params, self.embed, self.question_lstm)
            if self.config.modalities:
                g_av, beta, contexts = self.audio_visual(params, g_q, frames, beta_override)
                out.append(RoundContext(dc.concat([g_q, g_av, g_h]), beta, contexts))
            else:
                out.append(RoundContext(dc.concat([g_q, g_h])))
        return out

    # -- objectives and inference ---------------------------------------------

    def dialog_loss(
        self, params: ModelParams, rounds: Sequence[Round], features: Mapping[str, np.ndarray] | None = None
    ) -> tuple[Tensor, int]:
        """Summed answer cross-entropy over the given rounds and the target-token count."""
        total, count = None, 0
        for r, ctx in zip(rounds, self.encode_rounds(params, rounds, features)):
            loss, n = teacher_forced_loss(self.decoder, params, ctx.g_n, r.answer)
            total = loss if total is None else dc.add(total, loss)
            count += n
        return total, count

    def generate(
        self,
        params: ModelParams,
        ctx: RoundContext,
        beam_size: int = 5,
        max_len: int = 30,
        length_norm: bool = False,
    ) -> Hypothesis:
        return beam_search(self.decoder, params, ctx.g_n, beam_size, max_len, length_norm)[0]
