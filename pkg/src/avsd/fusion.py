"""Naive and attentional (question-conditioned) fusion of modality projections."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, Tensor, UsageError
from .encoders import ModalityContext

FUSION_MODES = ("naive", "attentional")


class ConfigurationError(ValueError):
    pass


@dataclass
class FusionParams:
    W_B: Tensor  # (A, Hq), applied to the question code
    w_B: Tensor  # (A,)
    V_B: dict[str, Tensor]  # per modality (A, D_k)
    b_B: dict[str, Tensor]  # per modality (A,)


@dataclass
class FusionOutput:
    g_av: Tensor
    beta: np.ndarray  # modality weights; all ones in naive mode


def _combine(d: Sequence[Tensor], beta: Tensor | None) -> Tensor:
    # shared by both modes so that beta == 1 reproduces naive fusion exactly
    total = None
    for k, dk in enumerate(d):
        term = dk if beta is None else dc.mul(dc.index(beta, k), dk)
        total = term if total is None else dc.add(total, term)
    return dc.tanh(total)


def naive_fuse(d: Sequence[Tensor]) -> FusionOutput:
    """``tanh(sum_k d_k)``."""
    if len(d) == 0:
        raise UsageError("naive_fuse needs at least one modality")
    _check_same_dim(d)
    return FusionOutput(_combine(d, None), np.ones(len(d)))


def _check_same_dim(d: Sequence[Tensor]) -> None:
    shapes = {x.shape for x in d}
    if len(shapes) != 1:
        raise DimensionError(f"modality projections differ in shape: {sorted(shapes)}")


def modality_scores(g_q: Tensor, contexts: Sequence[ModalityContext], p: FusionParams) -> Tensor:
    """One relevance score per modality: ``w_B^T tanh(W_B g_q + V_Bk c_k + b_Bk)``."""
    if len(contexts) == 0:
        raise ConfigurationError("no modality contexts given")
    query = dc.matmul(p.W_B, g_q)
    scores = []
    for ctx in contexts:
        if ctx.modality not in p.V_B:
            raise ConfigurationError(f"modality {ctx.modality!r} has no fusion parameters (have {sorted(p.V_B)})")
        hidden = dc.add(query, dc.affine(p.V_B[ctx.modality], ctx.context, p.b_B[ctx.modality]))
        scores.append(dc.matmul(p.w_B, dc.tanh(hidden)))
    return dc.stack(scores)


def attentional_fuse(
    g_q: Tensor,
    contexts: Sequence[ModalityContext],
    d: Sequence[Tensor],
    p: FusionParams,
    beta_override: np.ndarray | None = None,
) -> FusionOutput:
    """``tanh(sum_k beta_k d_k)`` with ``beta = softmax(modality_scores)``.

    ``beta_override`` replaces the learned weights (test hook); all-ones gives
    naive fusion.
    """
    if len(contexts) != len(d):
        raise ConfigurationError(f"{len(contexts)} contexts but {len(d)} projections")
    if len(d) == 0:
        raise UsageError("attentional_fuse needs at least one modality")
    _check_same_dim(d)
    if beta_override is not None:
        beta = Tensor(np.asarray(beta_override, dtype=d[0].dtype))
        if beta.shape != (len(d),):
            raise DimensionError(f"beta override shape {beta.shape}, expected ({len(d)},)")
    else:
        beta = dc.softmax(modality_scores(g_q, contexts, p))
    return FusionOutput(_combine(d, beta), beta.data.copy())
