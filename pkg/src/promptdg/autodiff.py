"""Dense float64 arrays with recorded reverse-mode differentiation.

Every training loss in this package is built from the primitives below.
Operations record themselves on the innermost active ``Tape`` whenever an
input participates in gradient computation; forward-only evaluation (no
active tape) is pure. All arithmetic is 64-bit and any non-finite result
raises immediately.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to the primitive's contract."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Backward pass requested on a value the tape did not produce."""


_TAPE_STACK: list["Tape"] = []


class Array:
    """Multidimensional float64 value, optionally a differentiable leaf.

    ``grad`` is populated by ``Tape.backward`` for leaves created with
    ``requires_grad=True`` and accumulates across backward calls until an
    optimizer step (or the caller) clears it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_on_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("array initialised with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._on_tape = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Array(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_array(x) -> Array:
    """Wrap numpy data or a scalar as a constant; pass Arrays through."""
    if isinstance(x, Array):
        return x
    return Array(x)


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Recording order is execution order, so the reversed record list is a
    valid reverse topological order; ``backward`` visits each recorded node
    exactly once and clears the tape afterwards.
    """

    def __init__(self):
        self._records: list[tuple[Array, tuple, Callable]] = []
        self._output_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        if _TAPE_STACK and _TAPE_STACK[-1] is self:
            _TAPE_STACK.pop()
        return False

    def _record(self, out: Array, inputs: tuple, backward: Callable) -> None:
        out._on_tape = True
        self._records.append((out, inputs, backward))
        self._output_ids.add(id(out))

    def backward(self, loss: Array) -> None:
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf."""
        if loss.data.shape != ():
            raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
        if id(loss) not in self._output_ids:
            raise TapeError("loss was not produced through this tape")
        flowing: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        leaves: dict[int, Array] = {}
        for _, inputs, _ in self._records:
            for inp in inputs:
                if isinstance(inp, Array) and inp.requires_grad:
                    leaves[id(inp)] = inp
        for out, inputs, backward in reversed(self._records):
            g = flowing.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not isinstance(inp, Array):
                    continue
                if not (inp.requires_grad or inp._on_tape):
                    continue
                key = id(inp)
                if key in flowing:
                    flowing[key] = flowing[key] + gi
                else:
                    flowing[key] = gi
        for key, leaf in leaves.items():
            g = flowing.get(key)
            if g is None:
                continue
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        self._records.clear()
        self._output_ids.clear()


def _finish(data: np.ndarray, op: str, inputs: tuple, backward: Callable) -> Array:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Array.__new__(Array)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._on_tape = False
    if _TAPE_STACK:
        needs = any(
            isinstance(i, Array) and (i.requires_grad or i._on_tape) for i in inputs
        )
        if needs:
            _TAPE_STACK[-1]._record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return np.ascontiguousarray(g).reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc

    def backward(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _finish(data, "add", (a, b), backward)


def sub(a, b) -> Array:
    return add(a, mul(b, -1.0))


def mul(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc
    a_data, b_data = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * b_data, a_data.shape),
            _unbroadcast(g * a_data, b_data.shape),
        )

    return _finish(data, "mul", (a, b), backward)


def matmul(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        return (g @ b_data.T, a_data.T @ g)

    return _finish(data, "matmul", (a, b), backward)


def transpose(a) -> Array:
    a = as_array(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D operand")

    def backward(g):
        return (g.T,)

    return _finish(a.data.T.copy(), "transpose", (a,), backward)


def reshape(a, shape) -> Array:
    a = as_array(a)
    old = a.data.shape
    data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return _finish(data, "reshape", (a,), backward)


def concat(parts: Sequence, axis: int = 0) -> Array:
    arrs = [as_array(p) for p in parts]
    if not arrs:
        raise ShapeError("concat of zero parts")
    data = np.concatenate([p.data for p in arrs], axis=axis)
    sizes = [p.data.shape[axis] for p in arrs]

    def backward(g):
        grads = []
        offset = 0
        for size in sizes:
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + size)
            grads.append(g[tuple(index)])
            offset += size
        return grads

    return _finish(data, "concat", tuple(arrs), backward)


def tanh(a) -> Array:
    a = as_array(a)
    data = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - data * data),)

    return _finish(data, "tanh", (a,), backward)


def exp(a) -> Array:
    a = as_array(a)
    data = np.exp(a.data)

    def backward(g):
        return (g * data,)

    return _finish(data, "exp", (a,), backward)


def log(a) -> Array:
    a = as_array(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    a_data = a.data

    def backward(g):
        return (g / a_data,)

    return _finish(data, "log", (a,), backward)


def sum_(a, axis: int | None = None) -> Array:
    a = as_array(a)
    data = a.data.sum(axis=axis)
    shape = a.data.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _finish(data, "sum", (a,), backward)


def mean(a, axis: int | None = None) -> Array:
    a = as_array(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / count)


def variance(a, axis: int) -> Array:
    """Population variance (divide by the axis length)."""
    a = as_array(a)
    n = a.data.shape[axis]
    mu = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mu
    data = np.mean(centered * centered, axis=axis)

    def backward(g):
        return (np.expand_dims(g, axis) * 2.0 * centered / n,)

    return _finish(data, "variance", (a,), backward)


def softmax(a, axis: int = -1) -> Array:
    a = as_array(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _finish(data, "softmax", (a,), backward)


def log_softmax(a, axis: int = -1) -> Array:
    """Numerically stable fused log(softmax(a)); never underflows to -inf."""
    a = as_array(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _finish(data, "log_softmax", (a,), backward)


def l2_normalize(a) -> Array:
    """Scale rows (last axis) to unit Euclidean norm."""
    a = as_array(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(norm == 0.0):
        raise NonFiniteError("l2_normalize of a zero vector")
    data = a.data / norm

    def backward(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        return ((g - data * inner) / norm,)

    return _finish(data, "l2_normalize", (a,), backward)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def sgd_step(
    params: Sequence[Array],
    lr: float,
    weight_decay: float = 0.0,
    momentum: float = 0.0,
    velocities: dict[int, np.ndarray] | None = None,
) -> None:
    """In-place p <- p - lr*(grad + weight_decay*p); grads are cleared.

    Momentum defaults to 0; when nonzero the caller owns the ``velocities``
    dict (keyed by id(param)) so state survives across steps.
    """
    for p in params:
        if p.grad is None:
            raise ValueError("sgd_step: parameter has no gradient")
        g = p.grad + weight_decay * p.data
        if momentum != 0.0:
            if velocities is None:
                raise ValueError("momentum requires a velocities dict")
            v = velocities.get(id(p))
            v = momentum * v + g if v is not None else g
            velocities[id(p)] = v
            g = v
        p.data -= lr * g
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteError("sgd_step produced non-finite parameters")
        p.grad = None


def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, the test oracle."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.copy().reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        fp = f(xf.reshape(x.shape))
        xf[i] = orig - h
        fm = f(xf.reshape(x.shape))
        xf[i] = orig
        flat[i] = (fp - fm) / (2.0 * h)
    return grad
