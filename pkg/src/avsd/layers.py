"""Embeddings, linear maps and stacked LSTMs over a named parameter registry."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, Tensor

INIT_SCALE = 0.08
FORGET_BIAS = 1.0


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    kind: str = "weight"  # weight | bias | lstm_bias


class ModelParams:
    """Ordered mapping from dotted names to learnable tensors."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._tensors: dict[str, Tensor] = {}
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, t: Tensor) -> None:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        self._tensors[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def values(self):
        return self._tensors.values()

    def num_scalars(self) -> int:
        return int(np.sum([t.size for t in self._tensors.values()]))

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(t.data.copy()) for k, t in self._tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: Tensor(t.data.astype(dtype)) for k, t in self._tensors.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._tensors.items()}

    def squared_norm(self) -> float:
        return float(np.sum([np.sum(t.data.astype(np.float64) ** 2) for t in self._tensors.values()]))

    def equal(self, other: "ModelParams") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[k].data, other[k].data) for k in self)


def init_params(specs: Iterable[ParamSpec], rng: np.random.Generator) -> ModelParams:
    """Weights ~ U(-0.08, 0.08); LSTM forget-gate biases 1.0; other biases 0."""
    params = ModelParams()
    for spec in specs:
        if spec.kind == "weight":
            data = rng.uniform(-INIT_SCALE, INIT_SCALE, size=spec.shape).astype(np.float32)
        elif spec.kind == "bias":
            data = np.zeros(spec.shape, dtype=np.float32)
        elif spec.kind == "lstm_bias":
            data = np.zeros(spec.shape, dtype=np.float32)
            H = spec.shape[0] // 4
            data[H : 2 * H] = FORGET_BIAS
        else:
            raise ValueError(f"unknown parameter kind {spec.kind!r} for {spec.name}")
        params.add(spec.name, Tensor(data))
    return params


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Embedding:
    name: str
    vocab_size: int
    embed_dim: int

    def specs(self) -> list[ParamSpec]:
        return [ParamSpec(f"{self.name}.weight", (self.vocab_size, self.embed_dim))]

    def lookup(self, params: ModelParams, token: int) -> Tensor:
        if not 0 <= token < self.vocab_size:
            raise IndexError(f"token id {token} outside vocabulary of size {self.vocab_size}")
        return dc.index(params[f"{self.name}.weight"], token)

    def lookup_many(self, params: ModelParams, tokens: Sequence[int]) -> list[Tensor]:
        """Embed a token sequence with one gather; returns one row tensor per token."""
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise IndexError(f"token ids {tokens} outside vocabulary of size {self.vocab_size}")
        rows = dc.index(params[f"{self.name}.weight"], ids)
        return [dc.index(rows, i) for i in range(len(ids))]


@dataclass(frozen=True)
class Linear:
    name: str
    in_dim: int
    out_dim: int

    def specs(self) -> list[ParamSpec]:
        return [
            ParamSpec(f"{self.name}.W", (self.out_dim, self.in_dim)),
            ParamSpec(f"{self.name}.b", (self.out_dim,), "bias"),
        ]

    def __call__(self, params: ModelParams, x: Tensor) -> Tensor:
        return linear(x, params[f"{self.name}.W"], params[f"{self.name}.b"])


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    if x.shape != (W.shape[1],):
        raise DimensionError(f"linear: input {x.shape} does not match weight {W.shape}")
    return dc.affine(W, x, b)


LstmState = list[tuple[Tensor, Tensor]]


@dataclass(frozen=True)
class LstmStack:
    name: str
    input_size: int
    cell_size: int
    num_layers: int = 2

    def specs(self) -> list[ParamSpec]:
        out = []
        for layer in range(self.num_layers):
            n_in = self.input_size if layer == 0 else self.cell_size
            out.append(ParamSpec(f"{self.name}.l{layer}.W", (4 * self.cell_size, n_in + self.cell_size)))
            out.append(ParamSpec(f"{self.name}.l{layer}.b", (4 * self.cell_size,), "lstm_bias"))
        return out

    def zero_state(self, dtype=None) -> LstmState:
        dtype = dtype or dc.default_dtype()
        return [
            (Tensor(np.zeros(self.cell_size, dtype)), Tensor(np.zeros(self.cell_size, dtype)))
            for _ in range(self.num_layers)
        ]

    def step(self, params: ModelParams, x: Tensor, state: LstmState | None = None) -> tuple[Tensor, LstmState]:
        return lstm_step(self, params, x, state)

    def encode(self, params: ModelParams, seq: Sequence[Tensor], init_state: LstmState | None = None):
        return lstm_encode(self, params, seq, init_state)


def lstm_step(
    stack: LstmStack, params: ModelParams, x: Tensor, state: LstmState | None = None
) -> tuple[Tensor, LstmState]:
    """Advance every layer by one time step; returns the top hidden state."""
    if x.shape != (stack.input_size,):
        raise DimensionError(f"{stack.name}: input {x.shape}, expected ({stack.input_size},)")
    if state is None:
        state = stack.zero_state(params[f"{stack.name}.l0.W"].dtype.type)
    if len(state) != stack.num_layers:
        raise DimensionError(f"{stack.name}: state has {len(state)} layers, expected {stack.num_layers}")
    new_state: LstmState = []
    inp = x
    for layer, (h, c) in enumerate(state):
        if h.shape != (stack.cell_size,) or c.shape != (stack.cell_size,):
            raise DimensionError(f"{stack.name}.l{layer}: state {h.shape}/{c.shape}, cell size {stack.cell_size}")
        h2, c2 = dc.lstm_cell(inp, h, c, params[f"{stack.name}.l{layer}.W"], params[f"{stack.name}.l{layer}.b"])
        new_state.append((h2, c2))
        inp = h2
    return inp, new_state


def lstm_encode(
    stack: LstmStack, params: ModelParams, seq: Sequence[Tensor], init_state: LstmState | None = None
) -> tuple[Tensor, list[LstmState]]:
    """Fold ``lstm_step`` over ``seq`` (zero initial state by default)."""
    if len(seq) == 0:
        raise dc.UsageError(f"{stack.name}: cannot encode an empty sequence")
    state = init_state
    states = []
    out = None
    for x in seq:
        out, state = lstm_step(stack, params, x, state)
        states.append(state)
    return out, states
