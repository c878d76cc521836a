"""Dense tensors with reverse-mode automatic differentiation.

Every value flowing through a loss is a :class:`DiffValue`. Primitives build the
graph eagerly; :func:`backward` walks it once in reverse topological order and
accumulates ``dL/dnode`` into each node's ``grad``.

Arrays keep the dtype they were created with. Model code runs in float32; the
gradient checks run the same graph in float64.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording provenance (samplers, frozen refs)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class DiffValue:
    """A tensor value plus its gradient slot and provenance."""

    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "_backward")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf", parents=(), backward=None):
        arr = np.asarray(value)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.value = arr
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents: tuple[DiffValue, ...] = tuple(parents)
        self.requires_grad = requires_grad
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"DiffValue(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    # operator sugar; everything routes through the primitives below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_value(x, dtype=None) -> DiffValue:
    """Wrap arrays as constant leaves; DiffValues pass through untouched."""
    if isinstance(x, DiffValue):
        return x
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    return DiffValue(arr)


def parameter(x) -> DiffValue:
    return DiffValue(np.array(x, copy=True), requires_grad=True)


def _node(value: np.ndarray, op: str, parents: Sequence[DiffValue], backward) -> DiffValue:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return DiffValue(value, op=op)
    return DiffValue(value, requires_grad=True, op=op, parents=parents, backward=backward)


def _same_shape(name: str, a: DiffValue, b: DiffValue) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _cast(x, like: DiffValue) -> DiffValue:
    v = as_value(x)
    if v.dtype != like.dtype and not v.requires_grad and v.op == "leaf":
        v = DiffValue(v.value.astype(like.dtype))
    return v


# --------------------------------------------------------------------------- primitives


def add(a, b) -> DiffValue:
    a = as_value(a)
    b = _cast(b, a)
    _same_shape("add", a, b)
    return _node(a.value + b.value, "add", (a, b), lambda g: (g, g))


def subtract(a, b) -> DiffValue:
    a = as_value(a)
    b = _cast(b, a)
    _same_shape("subtract", a, b)
    return _node(a.value - b.value, "subtract", (a, b), lambda g: (g, -g))


def multiply(a, b) -> DiffValue:
    a = as_value(a)
    b = _cast(b, a)
    _same_shape("multiply", a, b)
    av, bv = a.value, b.value
    return _node(av * bv, "multiply", (a, b), lambda g: (g * bv, g * av))


def scale(a, c: float) -> DiffValue:
    a = as_value(a)
    c = a.value.dtype.type(c)
    return _node(a.value * c, "scale", (a,), lambda g: (g * c,))


def matmul(a, b) -> DiffValue:
    a = as_value(a)
    b = _cast(b, a)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return _node(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def _conv3x3(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    cols = sliding_window_view(np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1))), (3, 3), axis=(2, 3))
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x, w) -> DiffValue:
    """3x3 convolution, stride 1, zero padding 1. x: (N, Cin, H, W), w: (Cout, Cin, 3, 3)."""
    x = as_value(x)
    w = _cast(w, x)
    if (
        x.value.ndim != 4
        or w.value.ndim != 4
        or w.shape[2:] != (3, 3)
        or w.shape[1] != x.shape[1]
    ):
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    xv, wv = x.value, w.value

    def backward(g):
        cols = sliding_window_view(np.pad(xv, ((0, 0), (0, 0), (1, 1), (1, 1))), (3, 3), axis=(2, 3))
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gx = _conv3x3(g, np.ascontiguousarray(wv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))
        return gx, gw

    return _node(_conv3x3(xv, wv), "conv2d", (x, w), backward)


def softmax(a) -> DiffValue:
    a = as_value(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, "softmax", (a,), backward)


def sigmoid(a) -> DiffValue:
    a = as_value(a)
    x = a.value
    # stable on both tails
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _node(s, "sigmoid", (a,), lambda g: (g * s * (1 - s),))


def log(a) -> DiffValue:
    a = as_value(a)
    x = a.value
    if np.any(x <= 0):
        raise ValueError(f"log: non-positive input (min {x.min()!r})")
    return _node(np.log(x), "log", (a,), lambda g: (g / x,))


def exp(a) -> DiffValue:
    a = as_value(a)
    e = np.exp(a.value)
    return _node(e, "exp", (a,), lambda g: (g * e,))


def sum_all(a) -> DiffValue:
    a = as_value(a)
    shape = a.shape
    out = np.asarray(a.value.sum(), dtype=a.dtype).reshape(1)
    return _node(out, "sum", (a,), lambda g: (np.full(shape, g[0], dtype=g.dtype),))


def mean_all(a) -> DiffValue:
    a = as_value(a)
    shape, n = a.shape, a.value.size
    out = np.asarray(a.value.mean(), dtype=a.dtype).reshape(1)
    return _node(out, "mean", (a,), lambda g: (np.full(shape, g[0] / n, dtype=g.dtype),))


def squared_norm(a) -> DiffValue:
    a = as_value(a)
    x = a.value
    out = np.asarray(np.vdot(x, x), dtype=a.dtype).reshape(1)
    return _node(out, "squared_norm", (a,), lambda g: (2 * g[0] * x,))


def reshape(a, shape: Sequence[int]) -> DiffValue:
    a = as_value(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.value.size:
        raise ShapeError(f"reshape: shape mismatch {a.shape} vs {shape}")
    old = a.shape
    return _node(a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def concatenate(values: Sequence, axis: int = 0) -> DiffValue:
    vals = [as_value(v) for v in values]
    if not vals:
        raise ShapeError("concatenate: no inputs")
    ref = vals[0]
    ax = axis % ref.value.ndim
    for v in vals[1:]:
        if v.value.ndim != ref.value.ndim or any(
            v.shape[k] != ref.shape[k] for k in range(ref.value.ndim) if k != ax
        ):
            raise ShapeError(f"concatenate: shape mismatch {ref.shape} vs {v.shape}")
    vals = [_cast(v, ref) for v in vals]
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=ax) for k in range(len(vals))
        )

    return _node(np.concatenate([v.value for v in vals], axis=ax), "concatenate", vals, backward)


def transpose(a) -> DiffValue:
    a = as_value(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D input, got {a.shape}")
    return _node(np.ascontiguousarray(a.value.T), "transpose", (a,), lambda g: (g.T,))


def take(a, start: int, stop: int, axis: int = 0) -> DiffValue:
    """Contiguous slice [start, stop) along one axis (the inverse of concatenate)."""
    a = as_value(a)
    ax = axis % a.value.ndim
    if not 0 <= start < stop <= a.shape[ax]:
        raise ShapeError(f"take: range [{start}, {stop}) out of bounds for axis {ax} of {a.shape}")
    idx = [slice(None)] * a.value.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _node(a.value[idx], "take", (a,), backward)


def broadcast_to(a, shape: Sequence[int]) -> DiffValue:
    """Explicit broadcast; size-1 axes of ``a`` are repeated to ``shape``."""
    a = as_value(a)
    shape = tuple(int(s) for s in shape)
    if len(shape) != a.value.ndim or any(s != d and s != 1 for s, d in zip(a.shape, shape)):
        raise ShapeError(f"broadcast_to: shape mismatch {a.shape} vs {shape}")
    axes = tuple(k for k, (s, d) in enumerate(zip(a.shape, shape)) if s != d)
    return _node(
        np.broadcast_to(a.value, shape).copy(),
        "broadcast_to",
        (a,),
        lambda g: (g.sum(axis=axes, keepdims=True),),
    )


PRIMITIVES: dict[str, Callable[..., DiffValue]] = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "scale": scale,
    "matmul": matmul,
    "conv2d": conv2d,
    "softmax": softmax,
    "sigmoid": sigmoid,
    "log": log,
    "exp": exp,
    "sum": sum_all,
    "mean": mean_all,
    "squared_norm": squared_norm,
    "reshape": reshape,
    "concatenate": concatenate,
    "transpose": transpose,
    "take": take,
    "broadcast_to": broadcast_to,
}


def apply_primitive(kind: str, *inputs, **kwargs) -> DiffValue:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    if kind == "concatenate":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


# --------------------------------------------------------------------------- composites


def silu(a) -> DiffValue:
    a = as_value(a)
    return multiply(a, sigmoid(a))


def log_sigmoid(a) -> DiffValue:
    return log(sigmoid(a))


# --------------------------------------------------------------------------- backward


def _topo_order(root: DiffValue) -> list[DiffValue]:
    order: list[DiffValue] = []
    seen: set[int] = set()
    stack: list[tuple[DiffValue, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: DiffValue) -> dict[int, np.ndarray]:
    """Accumulate d(root)/d(node) into ``node.grad`` for every reachable node.

    Returns a table keyed by ``id(node)`` for callers that prefer lookups.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return {id(n): n.grad for n in order}


# --------------------------------------------------------------------------- gradient oracle


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference estimate of df/dx, coordinate by coordinate, in float64."""
    if h <= 0:
        raise ValueError("finite_difference_gradient: h must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"finite_difference_gradient: non-finite f at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_gradients(
    build: Callable[[Sequence[DiffValue]], DiffValue],
    inputs: Iterable[np.ndarray],
    h: float = 1e-4,
) -> float:
    """Max elementwise relative error between backward() and central differences.

    ``build`` maps leaf DiffValues to a scalar. Everything runs in float64.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [parameter(a) for a in arrays]
    backward(build(leaves))
    worst = 0.0
    for k, leaf in enumerate(leaves):

        def f(xk, k=k):
            args = [DiffValue(a) for a in arrays]
            args[k] = DiffValue(xk)
            with no_grad():
                return build(args).item()

        numeric = finite_difference_gradient(f, arrays[k], h)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[k])
        worst = max(worst, float(relative_error(analytic, numeric).max(initial=0.0)))
    return worst
