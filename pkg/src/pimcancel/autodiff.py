"""Small reverse-mode automatic differentiation engine over dense float64 arrays.

Every differentiable operation is a plain function that computes its output
with numpy and, when any input requires a gradient, attaches a ``TapeNode``
holding a closure that maps the output gradient to input gradients.
``backward`` walks the recorded graph once in reverse topological order and
then releases it, so each forward pass supports exactly one backward pass.

Layer-level fused operations (convolutions, LUT interpolation, channel
normalisation) live in :mod:`pimcancel.layers` and register themselves
through :func:`record`.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class GraphError(RuntimeError):
    """Raised on invalid use of the tape (non-scalar loss, double backward)."""


class TapeNode:
    __slots__ = ("op", "inputs", "backward_fn", "output")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable, output: "Tensor"):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.output = output


class Tensor:
    """n-dimensional float64 array with an optional gradient buffer.

    Leaves created with ``requires_grad=True`` own a zero-initialised ``grad``
    array that ``backward`` accumulates into. Tensors produced by operations
    on such leaves carry a ``TapeNode`` until the graph is consumed.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64, copy=True, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name
        self._node: TapeNode | None = None
        self._released = False

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        t.data = data if data.flags.c_contiguous else data.copy()
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._node = None
        t._released = False
        return t

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
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad}{label})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out_data`` in a Tensor and append a tape node if needed.

    ``backward_fn`` receives the output gradient and returns one gradient
    (or None) per entry of ``inputs``, each shaped like that input.
    """
    inputs = tuple(inputs)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, needs)
    if needs:
        out._node = TapeNode(op, inputs, backward_fn, out)
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 and a.ndim == 0 or b.size == 1 and b.ndim == 0:
        return
    raise ShapeError(f"{op}: incompatible shapes {list(a.shape)} and {list(b.shape)} "
                     "(only identical shapes or a scalar operand are allowed)")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("add", a, b)
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("sub", a, b)
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd,
                  lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", (a,), -a.data, lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return record("square", (a,), ad * ad, lambda g: (2.0 * ad * g,))


def matmul(a, b) -> Tensor:
    """2-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    ad, bd = a.data, b.data
    return record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def sum_(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return record("sum", (a,), np.asarray(a.data.sum()),
                  lambda g: (np.full(shape, float(g)),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.size
    return record("mean", (a,), np.asarray(a.data.mean()),
                  lambda g: (np.full(shape, float(g) / n),))


def crop(a, start: int, stop: int) -> Tensor:
    """Slice ``a[..., start:stop]`` along the last (time) axis."""
    a = as_tensor(a)
    n = a.shape[-1]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"crop: range [{start}, {stop}) invalid for last axis of length {n}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return record("crop", (a,), a.data[..., start:stop], backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return record("relu", (x,), np.maximum(xd, 0.0), lambda g: (np.where(xd > 0, g, 0.0),))


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    if not 0 <= slope <= 1:
        raise ValueError(f"leaky_relu slope must lie in [0, 1], got {slope}")
    xd = x.data
    return record("leaky_relu", (x,), np.maximum(xd, slope * xd),
                  lambda g: (np.where(xd > 0, g, slope * g),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return record("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def centered_sigmoid(x) -> Tensor:
    """``2*sigmoid(x) - 1``; zero at zero and odd-symmetric."""
    x = as_tensor(x)
    s = expit(x.data)
    return record("centered_sigmoid", (x,), 2.0 * s - 1.0,
                  lambda g: (2.0 * g * s * (1.0 - s),))


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every ``requires_grad`` leaf.

    The graph reachable from ``loss`` is released afterwards; a second call
    without a fresh forward pass raises :class:`GraphError`.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise GraphError(f"backward requires a scalar loss, got shape {list(loss.shape)}")
    if loss._released:
        raise GraphError("graph already consumed by a previous backward; re-run the forward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    if loss._node is None:
        loss.grad = loss.grad + 1.0
        return

    # iterative DFS topological order
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for inp in t._node.inputs:
                if inp.requires_grad and id(inp) not in visited:
                    stack.append((inp, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        node = t._node
        if node is None:
            if g is not None:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        t.grad = g
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig

    for t in order:
        if t._node is not None:
            t._node = None
            t._released = True


def finite_diff_check(fn: Callable[..., Tensor], point, h: float = 1e-5, stencil: int = 2) -> float:
    """Compare autodiff gradients of a scalar function with central differences.

    Args:
        fn: maps one Tensor (or several, when ``point`` is a sequence) to a
            scalar Tensor. Must be pure.
        point: Tensor or sequence of Tensors at which to evaluate.
        h: finite-difference step.
        stencil: 2 for ``(f(x+h) - f(x-h)) / 2h``; 4 for the fourth-order
            central formula ``(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h``,
            which tolerates a larger ``h`` and so loses less to rounding.

    Returns:
        max over all coordinates of ``|analytic - numeric| / (|analytic| + 1e-8)``.
    """
    if stencil not in (2, 4):
        raise ValueError(f"stencil must be 2 or 4, got {stencil}")
    single = isinstance(point, Tensor)
    base = [point] if single else list(point)
    leaves = [Tensor(p.data, requires_grad=True) for p in base]
    loss = fn(*leaves)
    backward(loss)
    analytic = [leaf.grad.copy() for leaf in leaves]

    arrays = [leaf.data.copy() for leaf in leaves]

    def evaluate() -> float:
        return float(fn(*[Tensor._wrap(a, False) for a in arrays]).data)

    def shifted(flat, i, orig, delta) -> float:
        flat[i] = orig + delta
        value = evaluate()
        flat[i] = orig
        return value

    worst = 0.0
    for arr, ana in zip(arrays, analytic):
        flat = arr.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            d1 = shifted(flat, i, orig, h) - shifted(flat, i, orig, -h)
            if stencil == 2:
                num = d1 / (2.0 * h)
            else:
                d2 = shifted(flat, i, orig, 2 * h) - shifted(flat, i, orig, -2 * h)
                num = (8.0 * d1 - d2) / (12.0 * h)
            err = abs(ana_flat[i] - num) / (abs(ana_flat[i]) + 1e-8)
            worst = max(worst, err)
    return worst
