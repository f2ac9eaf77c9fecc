"""Dense NHWC tensors with reverse-mode automatic differentiation.

Every differentiable op records a node on the active :class:`Graph`. A graph
lives for one forward pass: :func:`backward` walks it once in reverse creation
order (a valid reverse topological order, since inputs always exist before the
outputs built from them) and then releases it.

Precision is a thread-local setting, ``"f32"`` for training and ``"f64"`` for
gradient checks::

    with precision("f64"):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        backward(sum(x * x))
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

#: Guard added to every divisor in :func:`div`.
DIV_EPS = 1e-8

_DTYPES = {"f32": np.float32, "f64": np.float64}
_local = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GraphError(RuntimeError):
    """Misuse of the autodiff tape (consumed graph, non-scalar loss, ...)."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def get_dtype():
    return getattr(_local, "dtype", np.float32)


def set_precision(name):
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}, expected one of {sorted(_DTYPES)}")
    _local.dtype = _DTYPES[name]


def get_precision():
    return "f64" if get_dtype() == np.float64 else "f32"


@contextlib.contextmanager
def precision(name):
    prev = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(prev)


def grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Node:
    __slots__ = ("index", "op", "inputs", "backward_fn", "graph")

    def __init__(self, index, op, inputs, backward_fn, graph):
        self.index = index
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.graph = graph


class Graph:
    """Append-only tape for one forward pass."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def record(self, op, inputs, backward_fn):
        if self.consumed:
            raise GraphError("cannot record on a consumed graph")
        node = Node(len(self.nodes), op, inputs, backward_fn, self)
        self.nodes.append(node)
        return node

    def release(self):
        self.consumed = True
        for node in self.nodes:
            node.inputs = ()
            node.backward_fn = None
        self.nodes = []


def current_graph():
    g = getattr(_local, "graph", None)
    if g is None or g.consumed:
        g = Graph()
        _local.graph = g
    return g


def reset_graph():
    """Drop the active graph without running backward (e.g. after an aborted step)."""
    g = getattr(_local, "graph", None)
    if g is not None:
        g.release()
    _local.graph = None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        if arr.ndim and min(arr.shape) < 1:
            raise DimensionError(f"every dim must be >= 1, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def node_id(self):
        return None if self.node is None else self.node.index

    @property
    def is_leaf(self):
        return self.node is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise DimensionError(f"item() needs a single element, shape is {self.shape}")

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data, inputs, backward_fn, op):
    """Wrap an op result; record a node when any input participates in autodiff."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node = None
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        g = current_graph()
        for t in inputs:
            if t.node is not None and t.node.graph is not g:
                raise GraphError(f"{op}: input belongs to a different (consumed) graph")
        out.node = g.record(op, inputs, backward_fn)
    return out


def backward(loss):
    """Accumulate dloss/dleaf into ``.grad`` of every leaf that requires grad."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss.node
    if node is None:
        raise GraphError("loss was not produced inside an active graph")
    graph = node.graph
    if graph.consumed:
        raise GraphError("graph already consumed by a previous backward call")
    pending = {node.index: np.ones_like(loss.data)}
    for n in reversed(graph.nodes[: node.index + 1]):
        gout = pending.pop(n.index, None)
        if gout is None:
            continue
        in_grads = n.backward_fn(gout)
        for t, g in zip(n.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            _check_finite(g, f"backward of {n.op}")
            if t.node is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
            else:
                prev = pending.get(t.node.index)
                pending[t.node.index] = g if prev is None else prev + g
    graph.release()
    if getattr(_local, "graph", None) is graph:
        _local.graph = None


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    """``a / (b + DIV_EPS)`` with broadcasting of ``b`` over ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    denom = b.data + DIV_EPS
    out = a.data / denom

    def bw(g):
        return _unbroadcast(g / denom, a.shape), _unbroadcast(-g * out / denom, b.shape)

    return _make(out, (a, b), bw, "div")


def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    # split on sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x, axis=-1):
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"log_softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


# ---------------------------------------------------------------- reductions / shape


def sum(x, axis=None):  # noqa: A001 - mirrors numpy
    out = np.asarray(x.data.sum(axis=axis), dtype=x.dtype)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(out, (x,), bw, "sum")


def mean(x, axis=None):
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis), 1.0 / n)


def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def pick(x, index):
    """Row-wise gather ``x[i, index[i]]`` of an N×K tensor."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise DimensionError(f"pick needs N×K input and N indices, got {x.shape} and {index.shape}")
    rows = np.arange(x.shape[0])
    out = x.data[rows, index]

    def bw(g):
        full = np.zeros_like(x.data)
        full[rows, index] = g
        return (full,)

    return _make(out, (x,), bw, "pick")


# ---------------------------------------------------------------- linear maps


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def conv1x1(x, weight, bias):
    """Per-pixel linear map of an N×H×W×C_in tensor; weight is C_in×C_out."""
    if x.ndim != 4 or weight.ndim != 2 or x.shape[3] != weight.shape[0]:
        raise DimensionError(f"conv1x1: input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"conv1x1: bias {bias.shape} does not match weight {weight.shape}")
    n, h, w, _ = x.shape
    flat = reshape(x, (n * h * w, x.shape[3]))
    return reshape(add(matmul(flat, weight), bias), (n, h, w, weight.shape[1]))


def _im2col3x3(xp, stride, ho, wo):
    cols = [
        xp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :]
        for i in range(3)
        for j in range(3)
    ]
    return np.stack(cols, axis=3)


def conv3x3(x, weight, bias=None, stride=1):
    """3×3 convolution with zero padding 1; weight is 3×3×C_in×C_out."""
    if x.ndim != 4 or weight.shape[:3] != (3, 3, x.shape[3]):
        raise DimensionError(f"conv3x3: input {x.shape} does not match weight {weight.shape}")
    n, h, w, cin = x.shape
    cout = weight.shape[3]
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _im2col3x3(xp, stride, ho, wo).reshape(n * ho * wo, 9 * cin)
    wmat = weight.data.reshape(9 * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, cout)

    def bw(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols.T @ g2).reshape(weight.shape)
        gcols = (g2 @ wmat.T).reshape(n, ho, wo, 9, cin)
        gxp = np.zeros_like(xp)
        k = 0
        for i in range(3):
            for j in range(3):
                gxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += gcols[:, :, :, k, :]
                k += 1
        gx = gxp[:, 1:-1, 1:-1, :]
        gb = None if bias is None else g2.sum(axis=0)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, bw, "conv3x3")


def strided_conv1x1(x, weight, stride):
    """Bias-free 1×1 projection sampling every ``stride``-th pixel (residual shortcut)."""
    if x.shape[3] != weight.shape[0]:
        raise DimensionError(f"projection: input {x.shape} does not match weight {weight.shape}")
    sub_x = x.data[:, ::stride, ::stride, :]
    n, ho, wo, cin = sub_x.shape
    flat = np.ascontiguousarray(sub_x).reshape(-1, cin)
    out = (flat @ weight.data).reshape(n, ho, wo, weight.shape[1])

    def bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = np.zeros_like(x.data)
        gx[:, ::stride, ::stride, :] = (g2 @ weight.data.T).reshape(sub_x.shape)
        return gx, flat.T @ g2

    return _make(out, (x, weight), bw, "projection")


def global_avg_pool(x):
    """Mean over H and W of an N×H×W×C tensor, keeping N×1×1×C."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool needs N×H×W×C input, got {x.shape}")
    hw = x.shape[1] * x.shape[2]
    out = x.data.sum(axis=(1, 2), keepdims=True) / hw

    def bw(g):
        return (np.broadcast_to(g / hw, x.shape).astype(x.dtype),)

    return _make(out, (x,), bw, "global_avg_pool")


def batch_norm(x, gamma, beta, running=None, training=True, momentum=0.1, eps=1e-5):
    """Per-channel normalization of an N×H×W×C tensor.

    ``running`` is a ``(mean, var)`` pair of arrays. In training mode the batch
    statistics are used and ``running`` is updated in place; otherwise
    ``running`` is applied as a fixed affine map.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.data.mean(axis=axes)
        centered = x.data - mu
        var = (centered * centered).mean(axis=axes)
        if running is not None:
            m = x.data.size // c
            running[0][...] = (1 - momentum) * running[0] + momentum * mu
            running[1][...] = (1 - momentum) * running[1] + momentum * var * m / max(m - 1, 1)
    else:
        mu, var = running
        centered = x.data - mu
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv_std).astype(x.dtype)
    out = xhat * gamma.data + beta.data
    count = x.data.size // c

    def bw(g):
        gb = g.sum(axis=axes)
        gg = (g * xhat).sum(axis=axes)
        dxhat = g * gamma.data
        if training:
            gx = inv_std / count * (count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            gx = dxhat * inv_std
        return gx.astype(x.dtype), gg, gb

    return _make(out.astype(x.dtype), (x, gamma, beta), bw, "batch_norm")


def softplus(x):
    """``log(1 + e^x)`` computed without overflow."""
    d = x.data
    out = (np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))).astype(x.dtype)
    e = np.exp(-np.abs(d))
    grad = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * grad,), "softplus")
