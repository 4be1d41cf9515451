"""ADAM / RMSprop optimization with L2, dev-perplexity model selection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .data import DatasetSplit, FeatureStore, Round, Vocabulary, make_rounds
from .diffcore import UsageError
from .layers import ModelParams
from .model import DialogModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2_lambda: float = 1e-5
    max_epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "adam"
    rms_decay: float = 0.9
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class DialogData:
    """One dialog ready for training: tokenized rounds plus its feature matrices."""

    video_id: str
    rounds: list[Round]
    features: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_tokens(self) -> int:
        return sum(len(r.answer) for r in self.rounds)


def prepare_corpus(
    split: DatasetSplit,
    vocab: Vocabulary,
    store: FeatureStore | None = None,
    use_captions: bool = False,
) -> list[DialogData]:
    out = []
    for ex in split:
        feats = store.load(ex.video_id) if store is not None else {}
        out.append(DialogData(ex.video_id, make_rounds(ex, vocab, use_captions), feats))
    return out


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def _grads_with_l2(params: ModelParams, l2: float) -> dict[str, np.ndarray]:
    grads = {}
    for name, p in params.items():
        if p.grad is None:
            raise UsageError(f"parameter {name} has no gradient")
        grads[name] = p.grad + l2 * p.data if l2 else p.grad
    return grads


def adam_step(params: ModelParams, state: OptimizerState, config: TrainConfig) -> None:
    """Bias-corrected ADAM; L2 enters as ``lambda * w`` added to the gradient."""
    grads = _grads_with_l2(params, config.l2_lambda)
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.first:
            state.first[name] = np.zeros_like(p.data)
            state.second[name] = np.zeros_like(p.data)
        m, v = state.first[name], state.second[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.data.dtype)


def rmsprop_step(params: ModelParams, state: OptimizerState, config: TrainConfig) -> None:
    grads = _grads_with_l2(params, config.l2_lambda)
    state.t += 1
    rho = config.rms_decay
    for name, p in params.items():
        g = grads[name]
        if name not in state.second:
            state.second[name] = np.zeros_like(p.data)
        v = state.second[name]
        v *= rho
        v += (1.0 - rho) * g * g
        p.data -= (config.learning_rate * g / (np.sqrt(v) + config.eps)).astype(p.data.dtype)


def optimizer_step(params: ModelParams, state: OptimizerState, config: TrainConfig) -> None:
    if config.optimizer == "adam":
        adam_step(params, state, config)
    else:
        rmsprop_step(params, state, config)


def clip_gradients(params: ModelParams, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values() if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


# ---------------------------------------------------------------------------
# epochs


def train_epoch(
    model: DialogModel,
    corpus: Sequence[DialogData],
    params: ModelParams,
    state: OptimizerState,
    config: TrainConfig,
    rng: np.random.Generator,
) -> float:
    """One shuffled pass; returns the mean per-token training loss."""
    if not corpus:
        raise UsageError("empty training set")
    order = rng.permutation(len(corpus))
    total_loss, total_tokens = 0.0, 0
    for start in range(0, len(order), config.batch_size):
        batch = [corpus[i] for i in order[start : start + config.batch_size]]
        batch_tokens = sum(d.num_tokens for d in batch)
        params.zero_grad()
        for d in batch:
            loss, n = model.dialog_loss(params, d.rounds, d.features)
            total_loss += float(loss.data)
            total_tokens += n
            dc.backward(dc.mul(loss, 1.0 / batch_tokens))
        for p in params.values():
            if p.grad is None:  # unreachable this batch, e.g. history LSTMs with no history
                p.grad = np.zeros_like(p.data)
        if config.clip_norm:
            clip_gradients(params, config.clip_norm)
        optimizer_step(params, state, config)
    return total_loss / total_tokens


def corpus_loss(model: DialogModel, corpus: Sequence[DialogData], params: ModelParams) -> tuple[float, int]:
    total, count = 0.0, 0
    with dc.no_grad():
        for d in corpus:
            loss, n = model.dialog_loss(params, d.rounds, d.features)
            total += float(loss.data)
            count += n
    return total, count


def perplexity(model: DialogModel, corpus: Sequence[DialogData], params: ModelParams) -> float:
    """``exp(total cross-entropy / total target tokens)``."""
    if not corpus:
        raise UsageError("perplexity of an empty dataset")
    total, count = corpus_loss(model, corpus, params)
    return math.exp(total / count)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_perplexity: float

    def line(self) -> str:
        return f"epoch={self.epoch}\ttrain_loss={self.train_loss:.6f}\tdev_perplexity={self.dev_perplexity:.6f}"


@dataclass
class FitResult:
    params: ModelParams
    best_epoch: int
    history: list[EpochRecord]

    @property
    def best_perplexity(self) -> float:
        return self.history[self.best_epoch - 1].dev_perplexity


def select_best(perplexities: Sequence[float]) -> int:
    """1-based index of the lowest value; ties go to the earliest epoch."""
    best = 0
    for i, v in enumerate(perplexities):
        if v < perplexities[best]:
            best = i
    return best + 1


def fit(
    model: DialogModel,
    train: Sequence[DialogData],
    dev: Sequence[DialogData],
    config: TrainConfig,
    params: ModelParams | None = None,
    rng: np.random.Generator | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    stop_below: float | None = None,
) -> FitResult:
    """Train up to ``max_epochs`` and keep the checkpoint with the lowest dev perplexity.

    ``stop_below`` ends training early once dev perplexity drops under it.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if params is None:
        params = model.init_params(rng)
    state = OptimizerState()
    history: list[EpochRecord] = []
    best_params, best_ppl = None, math.inf
    for epoch in range(1, config.max_epochs + 1):
        train_loss = train_epoch(model, train, params, state, config, rng)
        ppl = perplexity(model, dev, params)
        rec = EpochRecord(epoch, train_loss, ppl)
        history.append(rec)
        log.info(rec.line())
        if on_epoch is not None:
            on_epoch(rec)
        if ppl < best_ppl:
            best_ppl, best_params = ppl, params.copy()
        if best_params is None:
            best_params = params.copy()
        if stop_below is not None and ppl < stop_below:
            break
    best_epoch = select_best([r.dev_perplexity for r in history])
    return FitResult(best_params, best_epoch, history)
