"""Dense float64 tensors with a dynamic reverse-mode tape.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        loss = ops.sum(ops.relu(x @ w))
    tape.backward(loss)

Outside a tape every op is a plain numpy computation, which is what eval
mode and the finite-difference oracle rely on.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, DomainError, TapeError

# exp() of anything above this overflows float64
_EXP_MAX = 709.0
MASK_SENTINEL = -1e9

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording for the enclosed block, even inside a tape."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """An n-dimensional float64 array that can take part in autodiff.

    Leaf tensors created with ``requires_grad=True`` carry a ``grad`` buffer
    of the same shape, zero-initialised and accumulated into by
    :meth:`Tape.backward`.  Tensors produced by recorded ops are interior
    nodes: they are flagged ``requires_grad`` but never hold ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._tape: Tape | None = None

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
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self, grad=None) -> None:
        if self._tape is None:
            raise TapeError("tensor was not produced on a tape; nothing to backpropagate")
        self._tape.backward(self, grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Record of the ops executed while the tape is active.

    ``backward`` replays the record in reverse order, visiting each node
    once.  A tape can only be replayed once; call :meth:`reset` to reuse it.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape context exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def reset(self) -> None:
        for node in self._nodes:
            node.output._tape = None
        self._nodes = []
        self._consumed = False

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        if self._consumed:
            raise TapeError("cannot record onto a tape that was already replayed; reset() it first")
        output.requires_grad = True
        output._tape = self
        self._nodes.append(_Node(inputs, output, backward))

    def backward(self, output: Tensor, grad=None) -> None:
        if self._consumed:
            raise TapeError("backward() called twice on the same tape without reset()")
        if grad is None:
            if output.size != 1:
                raise TapeError(f"backward() without an explicit gradient needs a scalar, got shape {output.shape}")
            seed = np.ones_like(output.data)
        else:
            seed = np.broadcast_to(np.asarray(grad, dtype=np.float64), output.shape).copy()
        self._consumed = True

        if output.is_leaf:
            if output.requires_grad:
                output.grad += seed
            return
        if output._tape is not self:
            raise TapeError("output tensor was recorded on a different tape")

        pending: dict[int, np.ndarray] = {id(output): seed}
        for node in reversed(self._nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp.grad += gi
                else:
                    key = id(inp)
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    out._tape = None
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward)
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


def _broadcast_shape(a: Tensor, b: Tensor, name: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def relu(t: Tensor) -> Tensor:
    t = as_tensor(t)
    # subgradient 0 at 0; maximum (unlike where) lets NaN through
    active = t.data > 0.0
    return _record(np.maximum(t.data, 0.0), (t,), lambda g: (g * active,))


def exp(t: Tensor) -> Tensor:
    t = as_tensor(t)
    out = np.exp(np.minimum(t.data, _EXP_MAX))
    clipped = t.data > _EXP_MAX
    return _record(out, (t,), lambda g: (np.where(clipped, 0.0, g * out),))


def log(t: Tensor) -> Tensor:
    t = as_tensor(t)
    if np.any(t.data <= 0.0):
        raise DomainError("log: argument must be strictly positive")
    x = t.data
    return _record(np.log(x), (t,), lambda g: (g / x,))


def sqrt(t: Tensor) -> Tensor:
    t = as_tensor(t)
    if np.any(t.data < 0.0):
        raise DomainError("sqrt: argument must be non-negative")
    out = np.sqrt(t.data)
    safe = np.where(out > 0.0, out, 1.0)
    # the derivative is unbounded at 0; use 0 there
    return _record(out, (t,), lambda g: (np.where(out > 0.0, 0.5 * g / safe, 0.0),))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*args)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(t: Tensor) -> Tensor:
    t = as_tensor(t)
    if t.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {t.shape}")
    return _record(t.data.T.copy(), (t,), lambda g: (g.T,))


def reshape(t: Tensor, shape) -> Tensor:
    t = as_tensor(t)
    src = t.shape
    try:
        out = t.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _record(out.copy(), (t,), lambda g: (g.reshape(src),))


# ---------------------------------------------------------------- reductions


def _check_axis(t: Tensor, axis, name: str):
    if axis is None:
        if t.size == 0:
            raise DimensionError(f"{name}: cannot reduce an empty tensor")
        return None
    ax = axis if axis >= 0 else axis + t.ndim
    if not 0 <= ax < t.ndim:
        raise DimensionError(f"{name}: axis {axis} out of range for shape {t.shape}")
    if t.shape[ax] == 0:
        raise DimensionError(f"{name}: cannot reduce over empty axis {axis} of shape {t.shape}")
    return ax


def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    t = as_tensor(t)
    axis = _check_axis(t, axis, "sum")
    shape = t.shape
    return _record(
        np.sum(t.data, axis=axis, keepdims=keepdims),
        (t,),
        lambda g: (_expand(g, shape, axis, keepdims).copy(),),
    )


def mean(t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    axis = _check_axis(t, axis, "mean")
    shape = t.shape
    n = t.size if axis is None else shape[axis]
    return _record(
        np.mean(t.data, axis=axis, keepdims=keepdims),
        (t,),
        lambda g: (_expand(g, shape, axis, keepdims) / n,),
    )


def var(t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Biased (population) variance: divides by the reduced count N."""
    t = as_tensor(t)
    axis = _check_axis(t, axis, "var")
    n = t.size if axis is None else t.shape[axis]
    centered = t.data - np.mean(t.data, axis=axis, keepdims=True)
    out = np.mean(centered * centered, axis=axis, keepdims=keepdims)
    shape = t.shape
    return _record(out, (t,), lambda g: (_expand(g, shape, axis, keepdims) * (2.0 / n) * centered,))


def max(t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    t = as_tensor(t)
    axis = _check_axis(t, axis, "max")
    out_k = np.max(t.data, axis=axis, keepdims=True)
    # ties share the gradient equally
    hit = t.data == out_k
    share = hit / np.sum(hit, axis=axis, keepdims=True)
    out = out_k if keepdims else (out_k.reshape(()) if axis is None else np.squeeze(out_k, axis))
    shape = t.shape
    return _record(out, (t,), lambda g: (_expand(g, shape, axis, keepdims) * share,))


_REDUCE = {"sum": sum, "mean": mean, "var": var, "max": max}


def reduce(op: str, t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    try:
        fn = _REDUCE[op]
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}; expected one of {sorted(_REDUCE)}") from None
    return fn(t, axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------- softmax family


def _row_sum(x: np.ndarray) -> np.ndarray:
    # Sequential accumulation: exact zeros (masked columns) leave the result
    # bitwise unchanged, which pairwise summation does not guarantee.
    return np.cumsum(x, axis=-1)[..., -1:]


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    if axis not in (-1, t.ndim - 1):
        raise DimensionError("log_softmax: only the last axis is supported")
    if t.ndim == 0 or t.shape[-1] == 0:
        raise DimensionError(f"log_softmax: bad shape {t.shape}")
    shifted = t.data - np.max(t.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = shifted - np.log(_row_sum(e))
    soft = np.exp(out)
    return _record(out, (t,), lambda g: (g - soft * np.sum(g, axis=-1, keepdims=True),))


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    if axis not in (-1, t.ndim - 1):
        raise DimensionError("softmax: only the last axis is supported")
    shifted = t.data - np.max(t.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / _row_sum(e)
    return _record(out, (t,), lambda g: (out * (g - np.sum(g * out, axis=-1, keepdims=True)),))


# ---------------------------------------------------------------- indexing


def masked_fill(t: Tensor, mask, value: float) -> Tensor:
    t = as_tensor(t)
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, t.shape)
    except ValueError:
        raise DimensionError(f"masked_fill: mask shape {mask.shape} does not broadcast to {t.shape}") from None
    keep = ~full
    return _record(np.where(full, float(value), t.data), (t,), lambda g: (g * keep,))


def gather(t: Tensor, index) -> Tensor:
    """Pick ``t[i, index[i]]`` for every row of a matrix."""
    t = as_tensor(t)
    index = np.asarray(index, dtype=np.int64)
    if t.ndim != 2 or index.shape != (t.shape[0],):
        raise DimensionError(f"gather: need matrix and one index per row, got {t.shape} and {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= t.shape[1]):
        raise DimensionError(f"gather: index out of range for {t.shape[1]} columns")
    rows = np.arange(t.shape[0])
    shape = t.shape

    def backward(g):
        out = np.zeros(shape)
        out[rows, index] = g
        return (out,)

    return _record(t.data[rows, index], (t,), backward)


def take_rows(t: Tensor, rows) -> Tensor:
    t = as_tensor(t)
    rows = np.asarray(rows, dtype=np.int64)
    shape = t.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, rows, g)
        return (out,)

    return _record(t.data[rows], (t,), backward)


def l2_normalize(t: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    return div(t, sqrt(add(sum(mul(t, t), axis=axis, keepdims=True), eps)))


# ---------------------------------------------------------------- verification


def check_gradients(f: Callable[..., Tensor], x, h: float = 1e-5) -> float:
    """Compare tape gradients of scalar ``f(*xs)`` with central differences.

    ``x`` is a tensor or a sequence of tensors; each is perturbed in place one
    coordinate at a time and restored afterwards.  Returns the largest
    ``|fd - ad| / max(1, |fd|, |ad|)`` over every coordinate.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    try:
        with Tape() as tape:
            out = as_tensor(f(*xs))
        if out.size != 1:
            raise DimensionError(f"check_gradients: f must return a scalar, got shape {out.shape}")
        tape.backward(out)
        analytic = [t.grad.copy() for t in xs]

        worst = 0.0
        with no_grad():
            for t, ad in zip(xs, analytic):
                flat = t.data.reshape(-1)
                ad_flat = ad.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = as_tensor(f(*xs)).item()
                    flat[i] = orig - h
                    fm = as_tensor(f(*xs)).item()
                    flat[i] = orig
                    fd = (fp - fm) / (2.0 * h)
                    err = abs(fd - ad_flat[i]) / np.max([1.0, abs(fd), abs(ad_flat[i])])
                    worst = np.max([worst, err])
        return float(worst)
    finally:
        for t, (rg, g) in zip(xs, saved):
            t.requires_grad = rg
            t.grad = g
