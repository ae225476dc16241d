"""Minimal dense-tensor engine with tape-based reverse-mode differentiation.

Values are float64 numpy arrays, row-major with the batch dimension first.
Every differentiable operation appends a :class:`Record` to the active
:class:`Tape`; :func:`backward` replays the tape in reverse and writes
``grad`` on the leaves that asked for it.

    >>> x = from_data([3], [1.0, 2.0, 3.0], requires_grad=True)
    >>> loss = (x * x).sum()
    >>> backward(loss)
    >>> x.grad.tolist()
    [2.0, 4.0, 6.0]
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "DegenerateInputError",
    "Record",
    "Tape",
    "Tensor",
    "backward",
    "concat",
    "current_tape",
    "from_data",
    "l2_normalize",
    "log_sum_exp",
    "matmul",
    "no_grad",
    "stop_gradient",
    "tensor",
]

NORM_EPS = 1e-12

_node_ids = itertools.count()


class DegenerateInputError(ValueError):
    """Raised when an input sits on a singularity of an op (e.g. a zero-norm row)."""


@dataclass
class Record:
    op: str
    inputs: tuple["Tensor", ...]
    output_id: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(t.node_id for t in self.inputs)


@dataclass
class Tape:
    """Ordered log of differentiable operations for one training context."""

    records: list[Record] = field(default_factory=list)

    def append(self, record: Record) -> None:
        self.records.append(record)

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _active_tape.reset(self._token)


_default_tape = Tape()
_active_tape: contextvars.ContextVar[Tape] = contextvars.ContextVar("slimssl_tape", default=_default_tape)
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("slimssl_grad", default=True)


def current_tape() -> Tape:
    return _active_tape.get()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording anything on the tape."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "is_leaf", "detached")

    __array_priority__ = 100  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data: Any, requires_grad: bool = False, *, _leaf: bool = True):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self.is_leaf = _leaf
        self.detached = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, idx: Any) -> "Tensor":
        return getitem(self, idx)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else self.shape[axis]
        return sum_(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def square(self) -> "Tensor":
        return square(self)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self) -> "Tensor":
        return transpose(self)


def tensor(values: Any, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def from_data(shape: Sequence[int], values: Sequence[float], requires_grad: bool = False) -> Tensor:
    """Build a tensor from a flat row-major value list.

    Raises ``ValueError`` if ``product(shape) != len(values)``.
    """
    shape = tuple(int(s) for s in shape)
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if math.prod(shape) != flat.size:
        raise ValueError(f"shape {shape} needs {math.prod(shape)} values, got {flat.size}")
    return Tensor(flat.reshape(shape).copy(), requires_grad=requires_grad)


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, detached from the tape; never accumulates grad."""
    out = Tensor(x.data, requires_grad=False)
    out.detached = True
    return out


def _as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    needs = _grad_enabled.get() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, _leaf=not needs)
    if needs:
        current_tape().append(Record(op, inputs, out.node_id, backward_fn))
    return out


# -- elementwise ---------------------------------------------------------

def add(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _make(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# -- structural ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return _make("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", out, (a,), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    return _make("transpose", a.data.T, (a,), lambda g: (g.T,))


def _is_basic_index(idx: Any) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(a: Tensor, idx: Any) -> Tensor:
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(a.shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make("getitem", a.data[idx], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(tensors))
        )

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


# -- fused numerics ------------------------------------------------------

def log_sum_exp(x: Tensor, scale: float = 1.0, axis: int | None = None) -> Tensor:
    """Max-shifted ``log(sum(exp(x / scale)))``; reduces over ``axis`` (all if None)."""
    if not np.all(np.isfinite(x.data)):
        raise ValueError("log_sum_exp received non-finite input")
    if scale <= 0:
        raise ValueError("scale must be positive")
    s = x.data / scale
    m = s.max(axis=axis, keepdims=True)
    e = np.exp(s - m)
    tot = e.sum(axis=axis, keepdims=True)
    out_keep = m + np.log(tot)
    soft = e / tot
    out = out_keep.reshape(()) if axis is None else np.squeeze(out_keep, axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (g * soft / scale,)

    return _make("log_sum_exp", out, (x,), bw)


def l2_normalize(x: Tensor) -> Tensor:
    """Divide each row of a 2-D tensor by its Euclidean norm.

    Rows with norm below 1e-12 raise :class:`DegenerateInputError` instead of
    being clamped, so collapsed embeddings surface as errors.
    """
    if x.ndim != 2:
        raise ValueError("l2_normalize expects a 2-D tensor")
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    if np.any(norms < NORM_EPS):
        raise DegenerateInputError("cannot normalize a zero-norm row")
    y = x.data / norms

    def bw(g):
        return ((g - y * np.sum(y * g, axis=1, keepdims=True)) / norms,)

    return _make("l2_normalize", y, (x,), bw)


# -- reverse pass --------------------------------------------------------

def backward(loss: Tensor, *, retain_tape: bool = False) -> None:
    """Populate ``grad`` (accumulating) on every leaf that requires it.

    The tape is cleared afterwards unless ``retain_tape`` is set.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape (no input requires grad)")
    tape = current_tape()
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output_id, None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node_id in grads:
                grads[inp.node_id] = grads[inp.node_id] + gi
            else:
                grads[inp.node_id] = gi
            if inp.is_leaf:
                leaves[inp.node_id] = inp
    for nid, leaf in leaves.items():
        g = grads.get(nid)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    if not retain_tape:
        tape.clear()
