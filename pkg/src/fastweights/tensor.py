"""Minimal dense tensor engine with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` whenever one of their
inputs requires a gradient. Outside a ``with Tape():`` block nothing is
recorded, which is how evaluation runs.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> backward(tape, loss)
    >>> x.grad
    array([2., 4.])
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "finite_diff_check",
    "NonDeterministicError",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "outer",
    "tsum",
    "mean",
    "exp",
    "relu",
    "elu1",
    "sigmoid",
    "softmax",
    "concat",
    "roll",
    "reshape",
    "swapaxes",
    "take",
]


class NonDeterministicError(RuntimeError):
    """Raised when a function under gradient check gives different results for equal inputs."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float64
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: div(o, self)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> Tensor:
        return swapaxes(self, -1, -2)


class _Node:
    __slots__ = ("name", "parents", "output", "backward", "tape")

    def __init__(self, name, parents, output, backward_fn, tape):
        self.name = name
        self.parents = parents
        self.output = output
        self.backward = backward_fn
        self.tape = tape


_TAPES: list[Tape] = []


class Tape:
    """Ordered record of differentiable operations; single use."""

    def __init__(self):
        self.records: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> Tape:
        if self.consumed:
            raise RuntimeError("tape already consumed by backward()")
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_finite(data: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{name} produced non-finite values")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, name: str) -> Tensor:
    _check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(name, tuple(parents), out, backward_fn, tape)
        out._node = node
        tape.records.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, (b if isinstance(b, Tensor) else Tensor(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return Tensor(a), Tensor(b)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):  # _make reports non-finite results
        out = a.data / b.data

    def bw(g):
        gb = -g * out / b.data
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy ``matmul`` semantics (batched leading dims allowed)."""
    a, b = _coerce(a, b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("matmul operands must have at least one dimension")
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    a2 = a.data[None, :] if a.ndim == 1 else a.data
    b2 = b.data[:, None] if b.ndim == 1 else b.data

    def bw(g):
        g2 = g
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if b.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        if a.ndim == 1:
            ga = ga[..., 0, :]
        if b.ndim == 1:
            gb = gb[..., :, 0]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def outer(u: Tensor, v: Tensor) -> Tensor:
    u, v = _coerce(u, v)
    if u.ndim != 1 or v.ndim != 1:
        raise ValueError(f"outer expects vectors, got shapes {u.shape} and {v.shape}")

    def bw(g):
        return g @ v.data, u.data @ g

    return _make(np.outer(u.data, v.data), (u, v), bw, "outer")


# -- reductions -------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


# -- nonlinearities ---------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def elu1(a: Tensor) -> Tensor:
    """ELU(x) + 1: x + 1 for x > 0, exp(x) otherwise."""
    pos = a.data > 0
    ex = np.exp(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data + 1.0, ex).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * np.where(pos, 1.0, ex),), "elu1")


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


# -- shape manipulation -----------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tensors, bw, "concat")


def roll(a: Tensor, shift: int, axis: int = -1) -> Tensor:
    """Circular shift toward higher indices (``out[i] = a[i - shift]``)."""
    return _make(np.roll(a.data, shift, axis=axis), (a,), lambda g: (np.roll(g, -shift, axis=axis),), "roll")


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _make(np.swapaxes(a.data, ax1, ax2).copy(), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def take(table: Tensor, index) -> Tensor:
    """Row gather ``table[index]`` (embedding lookup); index is an integer array."""
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _make(table.data[index], (table,), bw, "take")


# -- differentiation --------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> None:
    """Replay the tape in reverse and store d(loss)/d(leaf) in ``leaf.grad``.

    The tape is consumed; gradients of leaves reachable from ``loss`` are
    overwritten, not accumulated.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if tape.consumed:
        raise RuntimeError("tape already consumed by backward()")
    if loss._node is None or loss._node.tape is not tape:
        raise ValueError("loss was not recorded on this tape (detached loss)")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.records):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent._node is None:
                leaves[key] = parent
    for key, leaf in leaves.items():
        leaf.grad = np.asarray(grads[key], dtype=leaf.dtype).reshape(leaf.shape)
    tape.records.clear()
    tape.consumed = True


def _evaluate(f, params) -> float:
    out = f(*params)
    return float(np.asarray(out.data if isinstance(out, Tensor) else out).reshape(-1)[0])


def finite_diff_check(
    f: Callable[..., Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(*params)`` must return a scalar Tensor. The error per entry is
    ``|g_analytic - g_numeric| / max(1, |g_numeric|)``.
    """
    params = list(params)
    if any(p.dtype == np.float64 for p in params) and not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps={eps} outside [1e-6, 1e-4] for float64 parameters")
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = f(*params)
    backward(tape, loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    if _evaluate(f, params) != _evaluate(f, params):
        raise NonDeterministicError("two forward passes at the same point disagree")

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _evaluate(f, params)
            flat[i] = orig - eps
            fm = _evaluate(f, params)
            flat[i] = orig
            gn = (fp - fm) / (2.0 * eps)
            err = abs(ga.reshape(-1)[i] - gn) / max(1.0, abs(gn))
            if not math.isfinite(err):
                return math.inf
            worst = max(worst, err)
    return worst
