"""Dense tensors with tape-based reverse-mode differentiation.

Forward values live in NumPy arrays (float32 by default). Every differentiable
op appends a node to a thread-local tape when at least one input requires a
gradient; ``backward`` walks the tape in reverse and frees it afterwards.

Broadcasting is restricted to scalar-vs-tensor and equal shapes. Anything
else (e.g. adding a bias row to every frame) goes through an explicit op such
as :func:`expand_rows`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class UsageError(RuntimeError):
    pass


class Node:
    __slots__ = ("inputs", "outputs", "backward")

    def __init__(self, inputs, outputs, backward):
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


class ComputationTape:
    """Ordered record of ops; append order is a topological order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


class _State(threading.local):
    def __init__(self) -> None:
        self.tape = ComputationTape()
        self.grad_enabled = True
        self.dtype = DEFAULT_DTYPE


_state = _State()


def current_tape() -> ComputationTape:
    return _state.tape


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Set the dtype used for tensors created from Python data."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def default_dtype():
    return _state.dtype


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or _state.dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(inputs: Sequence[Tensor], outputs: Sequence[Tensor], fn: Callable) -> None:
    if not _state.grad_enabled:
        return
    if not any(t.requires_grad for t in inputs):
        return
    node = Node(tuple(inputs), tuple(outputs), fn)
    for out in outputs:
        out.requires_grad = True
        out._node = node
    _state.tape.record(node)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        g = np.reshape(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad ancestor of ``loss``.

    Leaf gradients accumulate across calls; the tape is cleared afterwards.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    if loss._node is None:
        tape.clear()
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
        return
    try:
        loss.grad = np.ones_like(loss.data)
        for node in reversed(tape.nodes):
            out_grads = [o.grad for o in node.outputs]
            if all(g is None for g in out_grads):
                continue
            if len(out_grads) > 1:
                out_grads = [np.zeros_like(o.data) if g is None else g for o, g in zip(node.outputs, out_grads)]
            in_grads = node.backward(*out_grads)
            for t, g in zip(node.inputs, in_grads):
                if g is not None and t.requires_grad:
                    _accumulate(t, g)
    finally:
        tape.clear()


# ---------------------------------------------------------------------------
# elementwise


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.reshape(g.sum(), t.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data)
    _record((a, b), (out,), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    out = Tensor(a.data - b.data)
    _record((a, b), (out,), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    out = Tensor(a.data * b.data)
    _record((a, b), (out,), lambda g: (_unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)))
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    _record((x,), (out,), lambda g: (g * (1.0 - y * y),))
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow
    return 0.5 * np.tanh(0.5 * z) + 0.5


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    out = Tensor(y)
    _record((x,), (out,), lambda g: (g * y * (1.0 - y),))
    return out


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = Tensor(y)
    _record((x,), (out,), lambda g: (g * y,))
    return out


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: ``add``, ``mul``, ``tanh`` or ``sigmoid``."""
    table = {"add": add, "mul": mul, "tanh": tanh, "sigmoid": sigmoid}
    try:
        return table[op](*args)
    except KeyError:
        raise UsageError(f"unknown elementwise op {op!r}") from None


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(x: Tensor) -> Tensor:  # noqa: A001
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    _record((x,), (out,), lambda g: (np.broadcast_to(g, x.shape),))
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(np.reshape(x.data, shape))
    _record((x,), (out,), lambda g: (np.reshape(g, x.shape),))
    return out


def index(x: Tensor, key) -> Tensor:
    """Basic or integer-array indexing; the gradient scatters back with add."""
    out = Tensor(np.array(x.data[key]))

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    _record((x,), (out,), bw)
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise UsageError("concat of nothing")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[p.shape for p in parts]}: {exc}") from None
    out = Tensor(data)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    _record(parts, (out,), lambda g: tuple(np.split(g, bounds, axis=axis)))
    return out


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    parts = [as_tensor(p) for p in parts]
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    out = Tensor(np.stack([p.data for p in parts]))
    _record(parts, (out,), lambda g: tuple(g[i] for i in range(len(parts))))
    return out


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {x.shape}")
    out = Tensor(np.ascontiguousarray(x.data.T))
    _record((x,), (out,), lambda g: (g.T,))
    return out


def expand_rows(v: Tensor, n: int) -> Tensor:
    """Repeat a vector into an ``n x len(v)`` matrix (explicit broadcast)."""
    if v.data.ndim != 1:
        raise DimensionError(f"expand_rows expects a vector, got {v.shape}")
    out = Tensor(np.tile(v.data, (n, 1)))
    _record((v,), (out,), lambda g: (g.sum(axis=0),))
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D operands; 1-D operands act as row/column vectors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise DimensionError(f"matmul: unsupported ranks {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def bw(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2:  # matrix @ vector
            return np.outer(g, bd), ad.T @ g
        if bd.ndim == 2:  # vector @ matrix
            return bd @ g, np.outer(ad, g)
        return g * bd, g * ad

    _record((a, b), (out,), bw)
    return out


def affine(W: Tensor, x: Tensor, b: Tensor) -> Tensor:
    """``W @ x + b`` as one node."""
    if W.data.ndim != 2 or x.data.ndim != 1 or W.shape[1] != x.shape[0]:
        raise DimensionError(f"affine: weight {W.shape} does not accept input {x.shape}")
    if b.shape != (W.shape[0],):
        raise DimensionError(f"affine: bias {b.shape} does not match weight {W.shape}")
    out = Tensor(W.data @ x.data + b.data)
    Wd, xd = W.data, x.data
    _record((W, x, b), (out,), lambda g: (np.outer(g, xd), Wd.T @ g, g))
    return out


# ---------------------------------------------------------------------------
# probabilistic ops


def _check_finite(x: np.ndarray, op: str) -> None:
    if np.isnan(x).any():
        raise NumericError(f"{op}: NaN in input")


def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "softmax")
    y = _softmax_np(x.data, axis)
    out = Tensor(y)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    _record((x,), (out,), bw)
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor(y)

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    _record((x,), (out,), bw)
    return out


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """``-log softmax(logits)[target]`` for a single 1-D logit vector."""
    if logits.data.ndim != 1:
        raise DimensionError(f"cross_entropy expects 1-D logits, got {logits.shape}")
    V = logits.shape[0]
    if not 0 <= target < V:
        raise IndexError(f"target {target} outside vocabulary of size {V}")
    _check_finite(logits.data, "cross_entropy")
    z = logits.data - logits.data.max()
    lse = np.log(np.exp(z).sum())
    out = Tensor(np.asarray(lse - z[target], dtype=logits.dtype))

    def bw(g):
        p = np.exp(z - lse)
        p[target] -= 1.0
        return (g * p,)

    _record((logits,), (out,), bw)
    return out


# ---------------------------------------------------------------------------
# fused recurrent cell


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, W: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One no-peephole LSTM cell update as a single two-output node.

    ``W`` is ``4H x (I + H)`` over ``[x; h]`` and gate blocks are ordered
    input, forget, cell candidate, output.
    """
    H = h.shape[0]
    if c.shape != (H,) or W.shape != (4 * H, x.shape[0] + H) or b.shape != (4 * H,):
        raise DimensionError(
            f"lstm_cell: x {x.shape}, h {h.shape}, c {c.shape} incompatible with W {W.shape}, b {b.shape}"
        )
    xh = np.concatenate([x.data, h.data])
    z = W.data @ xh + b.data
    s = _sigmoid(z)
    i, f, o = s[:H], s[H : 2 * H], s[3 * H :]
    gc = np.tanh(z[2 * H : 3 * H])
    c_new = f * c.data + i * gc
    tc = np.tanh(c_new)
    h_new = o * tc
    h_out, c_out = Tensor(h_new), Tensor(c_new)
    Wd, cd, nx = W.data, c.data, x.shape[0]

    def bw(dh, dc):
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dc * gc * i * (1.0 - i),
                dc * cd * f * (1.0 - f),
                dc * i * (1.0 - gc * gc),
                dh * tc * o * (1.0 - o),
            ]
        )
        dxh = Wd.T @ dz
        return dxh[:nx], dxh[nx:], dc * f, np.outer(dz, xh), dz

    _record((x, h, c, W, b), (h_out, c_out), bw)
    return h_out, c_out


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-3,
    floor: float = 1e-4,
) -> float:
    """Worst per-coordinate relative error of reverse-mode vs central differences.

    ``params`` should hold float64 data; ``loss_fn`` rebuilds the graph from them.
    The relative error denominator is ``max(floor, |analytic| + |numeric|)``.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            with no_grad():
                flat[j] = orig + h
                fp = float(loss_fn().data)
                flat[j] = orig - h
                fm = float(loss_fn().data)
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic.reshape(-1)[j])
            err = abs(a - numeric) / max(floor, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
