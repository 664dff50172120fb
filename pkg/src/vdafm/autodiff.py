"""A small reverse-mode autodiff engine over float64 numpy arrays.

Operations are recorded on the innermost active ``Tape`` whenever one of
their inputs requires a gradient::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = (w * w).sum()
    grads = tape.backward(loss)      # {w: array([2., 2., 2.])}

Outside a tape, operations are plain numpy computations.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NonFinite, NotScalar, ShapeMismatch, ZeroNorm

_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "tape", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    __array_priority__ = 100

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Append-only record of operations, in creation (= topological) order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> int:
        output.node_id = len(self.nodes)
        output.tape = self
        output.requires_grad = True
        self.nodes.append(_Node(op, tuple(inputs), output, backward))
        return output.node_id

    def backward(self, loss: Tensor, wrt: Optional[Sequence[Tensor]] = None) -> dict:
        """Gradients of scalar ``loss`` for every leaf that requires grad.

        Tensors listed in ``wrt`` are always present in the result (zeros
        when they did not take part in computing ``loss``).
        """
        if loss.data.size != 1:
            raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self or loss.node_id is None:
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            needs = tuple(t.requires_grad for t in node.inputs)
            parts = node.backward(g, needs)
            for t, part, need in zip(node.inputs, parts, needs):
                if not need or part is None:
                    continue
                if t.node_id is None or t.tape is not self:
                    leaves[id(t)] = t
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + part
                else:
                    grads[key] = part
        out = {t: grads[k] if k in grads else np.zeros_like(t.data) for k, t in leaves.items()}
        for t in wrt or ():
            if t not in out:
                out[t] = np.zeros_like(t.data)
        return out


def backward(loss: Tensor, wrt: Optional[Sequence[Tensor]] = None) -> dict:
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise ValueError("loss is not attached to a tape")
    return loss.tape.backward(loss, wrt)


# ----------------------------------------------------------------- helpers


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(op: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFinite(f"{op} produced non-finite values")


def make_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it when needed.

    ``backward(g, needs)`` must return one gradient (or None) per input.
    Also the hook for defining custom operations.
    """
    _check(op, data)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return make_op("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return make_op("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return make_op("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)

    def bw(g, needs):
        return (_unbroadcast(g / b.data, a.shape) if needs[0] else None,
                _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return make_op("div", out, (a, b), bw)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return make_op("scale", x.data * c, (x,), lambda g, needs: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    # an all-zero constant left operand (a zeroed modality) gives exact zeros
    # for both the product and the right-hand gradient, so skip the BLAS work
    a_zero = not a.requires_grad and not a.data.any()
    out_shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    # a stacked left operand against a plain matrix runs as one 2-D GEMM;
    # numpy's stacked matmul loop is several times slower here
    fold = a.ndim > 2 and b.ndim == 2

    def bw(g, needs):
        ga = gb = None
        if needs[0]:
            if fold:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if needs[1]:
            if a_zero:
                gb = np.zeros(b.shape)
            elif fold:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    if a_zero:
        data = np.zeros(out_shape)
    elif fold:
        data = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(out_shape)
    else:
        data = a.data @ b.data
    return make_op("matmul", data, (a, b), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op("concat", out, tensors, bw)


def slice_(x, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def bw(g, needs):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_op("slice", x.data[index].copy(), (x,), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape: {exc}") from None
    return make_op("reshape", out, (x,), lambda g, needs: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_op("transpose", np.transpose(x.data, axes), (x,),
                   lambda g, needs: (np.transpose(g, inverse),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_op("relu", np.where(mask, x.data, 0.0), (x,), lambda g, needs: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh approximation of GELU."""
    x = as_tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def bw(g, needs):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * du),)

    return make_op("gelu", out, (x,), bw)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_op("sigmoid", out, (x,), lambda g, needs: (g * out * (1.0 - out),))


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return make_op("log", out, (x,), lambda g, needs: (g / x.data,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return make_op("exp", out, (x,), lambda g, needs: (g * out,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    with np.errstate(divide="ignore"):
        return make_op("sqrt", out, (x,), lambda g, needs: (g * 0.5 / out,))


def clamp(x, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clip values; the gradient is passed only where no clipping happened."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    mask = out == x.data
    return make_op("clamp", out, (x,), lambda g, needs: (g * mask,))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op("sum", np.asarray(out), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis, keepdims), 1.0 / count)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, needs):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op("softmax", out, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g, needs):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_op("log_softmax", out, (x,), bw)


def layer_norm(x, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise to zero mean / unit variance along ``axis`` (no affine terms)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bw(g, needs):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * out).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return make_op("layer_norm", out, (x,), bw)


def dropout(x, p: float, rng: Optional[np.random.Generator], train: bool,
            mask: Optional[np.ndarray] = None) -> Tensor:
    """Inverted dropout. Identity unless ``train``; ``mask`` overrides sampling."""
    x = as_tensor(x)
    if not train or (p == 0.0 and mask is None):
        return x
    if mask is None:
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
        mask = (rng.random(x.shape) >= p) / (1.0 - p)
    mask = np.asarray(mask, dtype=np.float64)
    return make_op("dropout", x.data * mask, (x,), lambda g, needs: (g * mask,))


def l2_norm(x, axis: int = -1, keepdims: bool = False, eps: Optional[float] = None) -> Tensor:
    """Euclidean norm along ``axis``.

    Zero norms raise ``ZeroNorm`` unless ``eps`` is given, in which case
    norms are floored at ``eps``.
    """
    x = as_tensor(x)
    norm = np.sqrt((x.data**2).sum(axis=axis, keepdims=True))
    if eps is None:
        if np.any(norm == 0.0):
            raise ZeroNorm("l2_norm of an all-zero vector")
        floored = norm
    else:
        floored = np.maximum(norm, eps)
    out = floored if keepdims else np.squeeze(floored, axis=axis)

    def bw(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axis)
        live = norm >= (eps or 0.0)
        return (np.where(live, g * x.data / floored, 0.0),)

    return make_op("l2_norm", out, (x,), bw)


def normalize(x, axis: int = -1, eps: Optional[float] = None) -> Tensor:
    return div(x, l2_norm(x, axis=axis, keepdims=True, eps=eps))


def cosine_similarity(a, b, axis: int = -1, eps: Optional[float] = None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"cosine_similarity: {a.shape} vs {b.shape}")
    dot = sum_(mul(a, b), axis=axis)
    ss_a, ss_b = sum_(mul(a, a), axis=axis), sum_(mul(b, b), axis=axis)
    if eps is None:
        if np.any(ss_a.data == 0.0) or np.any(ss_b.data == 0.0):
            raise ZeroNorm("cosine_similarity with an all-zero vector")
    else:
        ss_a, ss_b = clamp(ss_a, lo=eps * eps), clamp(ss_b, lo=eps * eps)
    # one square root of the product rounds once, so parallel and
    # antiparallel vectors give exactly +1 / -1
    return div(dot, sqrt(mul(ss_a, ss_b)))


# ------------------------------------------------------------- grad check


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(Tensor(x)).item()
        flat[i] = orig - h
        down = f(Tensor(x)).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    if y.node_id is None:
        return np.zeros_like(xt.data)
    return tape.backward(y, wrt=[xt])[xt]


def max_relative_error(a: np.ndarray, n: np.ndarray) -> float:
    a, n = np.asarray(a), np.asarray(n)
    if a.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-3, tol: float = 1e-4) -> bool:
    """Compare tape gradients of scalar ``f`` at ``x`` with central differences."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return max_relative_error(analytic_grad(f, x), numeric_grad(f, x, h)) <= tol
