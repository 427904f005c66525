"""Dense float64 tensors with reverse-mode differentiation.

Only the operations the MIL models need are provided, and broadcasting is
limited to two explicit 2-D patterns:

* ``(N, D) op (N, 1)``: one value per row, repeated across columns
  (scoring patch features with a per-patch guidance value).
* ``(N, D) op (1, D)``: one row repeated down all rows (bias addition).

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to input gradients.  :func:`backward`
walks the graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "ConfigError",
    "DomainError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "set_debug",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "sigmoid",
    "tanh",
    "log",
    "exp",
    "affine",
    "clamp",
    "elementwise",
    "softmax_rows",
    "conv2d",
    "reshape",
    "transpose",
    "take",
    "concat_cols",
    "sum_all",
    "sum_rows",
    "mean_rows",
    "max_rows",
    "backward",
    "topological_order",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """An operation was asked for an unsupported configuration."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an op."""


_GRAD_ENABLED = True
_DEBUG = False


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug(flag: bool) -> None:
    """Toggle finiteness checks on every forward result."""
    global _DEBUG
    _DEBUG = bool(flag)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation.

    Attributes:
        data: the value, always a C-contiguous ``float64`` ndarray.
        requires_grad: whether gradients should flow to this tensor.
        grad: accumulated gradient (leaves only), ``None`` until populated.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(n < 1 for n in arr.shape):
            raise DimensionError(f"every extent must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar; each maps onto the module-level op
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn, op: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise DomainError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a 2-D ``(N, D)`` and ``(D, K)`` tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def fn(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _make(A @ B, (a, b), fn, "matmul")


# ---------------------------------------------------------------- elementwise


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if a.data.ndim == 2 and b.data.ndim == 2:
        n, d = a.shape
        if b.shape == (n, 1):
            return "col"
        if b.shape == (1, d):
            return "row"
    raise DimensionError(f"cannot broadcast {b.shape} against {a.shape}")


def _reduce_to(g: np.ndarray, kind: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "col":
        return g.sum(axis=1, keepdims=True)
    return g.sum(axis=0, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)

    def fn(g):
        return (g if a.requires_grad else None, _reduce_to(g, kind) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)

    def fn(g):
        return (g if a.requires_grad else None, -_reduce_to(g, kind) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be an ``(N, 1)`` column or ``(1, D)`` row."""
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)
    A, B = a.data, b.data

    def fn(g):
        ga = g * B if a.requires_grad else None
        gb = _reduce_to(g * A, kind) if b.requires_grad else None
        return ga, gb

    return _make(A * B, (a, b), fn, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def affine(a: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """``scale * a + shift`` with constant scalars."""
    scale = float(scale)
    return _make(a.data * scale + shift, (a,), lambda g: (g * scale,), "affine")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    # tanh form: one ufunc, no overflow for large |x|
    out = 0.5 * np.tanh(0.5 * a.data) + 0.5
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        bad = int(np.flatnonzero(x.reshape(-1) <= 0)[0])
        raise DomainError(f"log of non-positive value {x.reshape(-1)[bad]!r} at flat index {bad}")
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into ``[lo, hi]``; gradient is zero where clipping was active."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clamp")


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "neg": neg, "log": log, "exp": exp}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch an elementwise op by name."""
    if op in _UNARY:
        if b is not None:
            raise ConfigError(f"{op} is unary")
        return _UNARY[op](_as_tensor(a))
    if op in _BINARY:
        if b is None:
            raise ConfigError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    raise ConfigError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------- reductions / shape


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis of a 2-D tensor."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects 2-D input, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (x,), fn, "softmax_rows")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects 2-D input, got {a.shape}")
    return _make(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,), "transpose")


def take(a: Tensor, index) -> Tensor:
    """Gather flat elements ``a.ravel()[index]``; result has ``index``'s shape."""
    index = np.asarray(index, dtype=np.int64)
    flat = a.data.reshape(-1)
    if index.size and (index.min() < 0 or index.max() >= flat.size):
        raise DimensionError(f"take index out of range for {flat.size} elements")
    src = a.shape

    def fn(g):
        buf = np.bincount(index.reshape(-1), weights=g.reshape(-1), minlength=flat.size)
        return (buf.reshape(src),)

    return _make(flat[index], (a,), fn, "take")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors with equal row counts along columns."""
    parts = [_as_tensor(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise DimensionError(f"concat_cols shapes: {[p.shape for p in parts]}")
    edges = np.cumsum([0] + [p.shape[1] for p in parts])

    def fn(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), fn, "concat_cols")


def sum_all(a: Tensor) -> Tensor:
    src = a.shape
    return _make(np.array([a.data.sum()]), (a,), lambda g: (np.full(src, g[0]),), "sum_all")


def sum_rows(a: Tensor) -> Tensor:
    """Column sums of an ``(N, D)`` tensor -> ``(1, D)``."""
    n = a.shape[0]
    return _make(a.data.sum(axis=0, keepdims=True), (a,),
                 lambda g: (np.repeat(g, n, axis=0),), "sum_rows")


def mean_rows(a: Tensor) -> Tensor:
    """Column means of an ``(N, D)`` tensor -> ``(1, D)``."""
    n = a.shape[0]
    return _make(a.data.mean(axis=0, keepdims=True), (a,),
                 lambda g: (np.repeat(g / n, n, axis=0),), "mean_rows")


def max_rows(a: Tensor) -> Tensor:
    """Column maxima of an ``(N, D)`` tensor -> ``(1, D)``.

    The gradient goes to the first row attaining the maximum in each column.
    """
    x = a.data
    arg = x.argmax(axis=0)
    cols = np.arange(x.shape[1])

    def fn(g):
        buf = np.zeros_like(x)
        buf[arg, cols] = g[0]
        return (buf,)

    return _make(x[arg, cols][None, :], (a,), fn, "max_rows")


# ---------------------------------------------------------------- convolution


def _tap_slices(sy: int, sx: int, h: int, w: int) -> tuple[tuple, tuple]:
    """Slices with ``out[dst] += y[src]`` meaning ``out[i, j] += y[i + sy, j + sx]``
    wherever both lie inside the ``h x w`` map."""
    dst = (slice(None), slice(max(0, -sy), h - max(0, sy)), slice(max(0, -sx), w - max(0, sx)))
    src = (slice(None), slice(max(0, sy), h + min(0, sy)), slice(max(0, sx), w + min(0, sx)))
    return dst, src


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, k: int, padding: int) -> Tensor:
    """Direct 2-D cross-correlation with zero padding, stride 1, batch of one.

    Shapes: ``x`` is ``(1, C, H, W)``, ``weight`` is ``(O, C, k, k)`` and
    ``bias`` is ``(O,)``.  Only ``(k=3, padding=1)`` and ``(k=1, padding=0)``
    are supported; both keep the spatial extent.
    """
    if (k, padding) not in ((3, 1), (1, 0)):
        raise ConfigError(f"unsupported conv config k={k}, padding={padding}")
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise DimensionError(f"conv2d input must be (1, C, H, W), got {x.shape}")
    _, c, h, w = x.shape
    o = weight.shape[0]
    if weight.shape != (o, c, k, k):
        raise DimensionError(f"conv2d weight {weight.shape} does not fit input {x.shape} with k={k}")
    if bias.shape != (o,):
        raise DimensionError(f"conv2d bias {bias.shape} does not fit {o} output channels")

    # one matmul for all k*k taps, then shifted accumulation of the small
    # (O, H, W) slices: no (C*k*k, H*W) column copy of the wide input
    taps = [(dy - padding, dx - padding) for dy in range(k) for dx in range(k)]
    Wcat = weight.data.transpose(2, 3, 0, 1).reshape(k * k * o, c)
    X = x.data[0].reshape(c, h * w)
    Y = (Wcat @ X).reshape(k * k, o, h, w)
    out = np.empty((o, h, w))
    out[:] = bias.data[:, None, None]
    for t, (sy, sx) in enumerate(taps):
        dst, src = _tap_slices(sy, sx, h, w)
        out[dst] += Y[t][src]

    def fn(g):
        g = g.reshape(o, h, w)
        # G[t] is the gradient of Y[t]: g shifted back by the tap offset
        G = np.zeros((k * k, o, h, w))
        for t, (sy, sx) in enumerate(taps):
            dst, src = _tap_slices(sy, sx, h, w)
            G[t][src] = g[dst]
        G = G.reshape(k * k * o, h * w)
        gx = (Wcat.T @ G).reshape(1, c, h, w) if x.requires_grad else None
        gw = (G @ X.T).reshape(k, k, o, c).transpose(2, 3, 0, 1) if weight.requires_grad else None
        gb = g.sum(axis=(1, 2)) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out.reshape(1, o, h, w), (x, weight, bias), fn, "conv2d")


# ---------------------------------------------------------------- backward


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Repeated calls without :meth:`Tensor.zero_grad` add to existing grads.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
