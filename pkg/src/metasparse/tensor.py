"""Dense float64 tensors with reverse-mode automatic differentiation.

Just enough of an array-op vocabulary for small convolutional multi-task
networks and their losses: matmul, conv2d, elementwise arithmetic,
activations, reductions, and the two loss heads (mse, cross_entropy).
Gradients are computed by walking the recorded graph in reverse
topological order.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """An operation was given inputs whose shapes do not conform."""


class GraphError(RuntimeError):
    """The compute graph was used in an unsupported way."""


class Tensor:
    """Immutable-after-forward value node; ``grad`` is written by backward().

    ``data`` is a C-contiguous (row-major) float64 array, so ``data.ravel()``
    is the flat view and ``data.size == prod(shape)`` by construction.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backprop", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backprop = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has shape {self.shape}, not scalar")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def make_node(data, parents, backprop) -> Tensor:
    """Build an op output, recording the graph only if a parent needs grads."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backprop = backprop
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# ---------------------------------------------------------------------------
# elementwise arithmetic (broadcast limited to scalars and leading batch axes)
# ---------------------------------------------------------------------------

def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    small, big = (a, b) if a.data.ndim < b.data.ndim else (b, a)
    if small.data.ndim < big.data.ndim and big.shape[-small.data.ndim:] == small.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)

    def backprop(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(g, b.shape))

    return make_node(a.data + b.data, (a, b), backprop)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)

    def backprop(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(g * a.data, b.shape))

    return make_node(a.data * b.data, (a, b), backprop)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def backprop(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return make_node(a.data @ b.data, (a, b), backprop)


def conv2d(x, w, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of [B, C_in, H, W] with [C_out, C_in, kH, kW]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: shapes {x.shape} and {w.shape} do not conform")
    bsz, _, h, wd = x.shape
    c_out, c_in, kh, kw = w.shape
    p = int(padding)
    h_out, w_out = h + 2 * p - kh + 1, wd + 2 * p - kw + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape} (padding={p})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    out = np.zeros((bsz, c_out, h_out, w_out))
    for i in range(kh):
        for j in range(kw):
            out += np.einsum("bchw,oc->bohw", xp[:, :, i:i + h_out, j:j + w_out], w.data[:, :, i, j])

    def backprop(g):
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    gw[:, :, i, j] = np.einsum("bchw,bohw->oc", xp[:, :, i:i + h_out, j:j + w_out], g)
            _accumulate(w, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + h_out, j:j + w_out] += np.einsum("bohw,oc->bchw", g, w.data[:, :, i, j])
            _accumulate(x, gxp[:, :, p:p + h, p:p + wd] if p else gxp)

    return make_node(out, (x, w), backprop)


# ---------------------------------------------------------------------------
# activations and pointwise maps
# ---------------------------------------------------------------------------

def relu(x) -> Tensor:
    x = _as_tensor(x)

    def backprop(g):
        if x.requires_grad:
            _accumulate(x, g * (x.data > 0))

    return make_node(np.maximum(x.data, 0.0), (x,), backprop)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus_values(z: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """(1/beta) * log(1 + exp(beta*z)), linear above beta*z > 30 to avoid overflow."""
    bz = beta * z
    out = np.where(bz > 30.0, z, np.log1p(np.exp(np.minimum(bz, 30.0))) / beta)
    # below -30 the log1p path underflows before exp does; exp(bz)/beta keeps
    # the result strictly positive down to the subnormal range
    low = bz < -30.0
    if np.any(low):
        out = np.where(low, np.exp(bz) / beta, out)
    return out


def softplus(x, beta: float = 1.0) -> Tensor:
    x = _as_tensor(x)
    if beta <= 0:
        raise ValueError(f"softplus: beta must be positive, got {beta}")

    def backprop(g):
        if x.requires_grad:
            _accumulate(x, g * _sigmoid(beta * x.data))

    return make_node(softplus_values(x.data, beta), (x,), backprop)


def log(x) -> Tensor:
    x = _as_tensor(x)

    def backprop(g):
        if x.requires_grad:
            _accumulate(x, g / x.data)

    return make_node(np.log(x.data), (x,), backprop)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out_data = np.exp(x.data)

    def backprop(g):
        if x.requires_grad:
            _accumulate(x, g * out_data)

    return make_node(out_data, (x,), backprop)


def square(x) -> Tensor:
    x = _as_tensor(x)

    def backprop(g):
        if x.requires_grad:
            _accumulate(x, g * 2.0 * x.data)

    return make_node(x.data * x.data, (x,), backprop)


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    out_data = np.sqrt(x.data)

    def backprop(g):
        if x.requires_grad:
            _accumulate(x, g * 0.5 / out_data)

    return make_node(out_data, (x,), backprop)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors the op vocabulary

    x = _as_tensor(x)
    axis = _normalize_axis(axis, x.data.ndim)

    def backprop(g):
        if x.requires_grad:
            _accumulate(x, _expand_reduction(g, x.shape, axis))

    return make_node(x.data.sum(axis=axis), (x,), backprop)


def mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    axis = _normalize_axis(axis, x.data.ndim)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in axis]))

    def backprop(g):
        if x.requires_grad:
            _accumulate(x, _expand_reduction(g, x.shape, axis) / count)

    return make_node(x.data.mean(axis=axis), (x,), backprop)


def _expand_reduction(g: np.ndarray, shape: tuple[int, ...], axis) -> np.ndarray:
    if axis is None:
        return np.full(shape, g)
    g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} do not conform")
    diff = pred.data - target.data
    n = pred.data.size

    def backprop(g):
        if pred.requires_grad:
            _accumulate(pred, g * 2.0 * diff / n)
        if target.requires_grad:
            _accumulate(target, g * -2.0 * diff / n)

    return make_node(np.mean(diff * diff), (pred, target), backprop)


def cross_entropy(logits, labels) -> Tensor:
    """Mean binary cross-entropy of logits against {0,1} labels."""
    logits, labels = _as_tensor(logits), _as_tensor(labels)
    if logits.shape != labels.shape:
        raise ShapeError(f"cross_entropy: shapes {logits.shape} and {labels.shape} do not conform")
    z, y = logits.data, labels.data
    n = z.size
    # log(1 + e^z) - y*z, stable for both signs of z
    value = np.mean(np.logaddexp(0.0, z) - y * z)

    def backprop(g):
        if logits.requires_grad:
            _accumulate(logits, g * (_sigmoid(z) - y) / n)

    return make_node(value, (logits, labels), backprop)


OPS = {
    "matmul": matmul,
    "conv2d": conv2d,
    "add": add,
    "mul": mul,
    "relu": relu,
    "softplus": softplus,
    "log": log,
    "exp": exp,
    "sum": sum,
    "mean": mean,
    "square": square,
    "sqrt": sqrt,
    "cross_entropy": cross_entropy,
    "mse": mse,
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch one forward operation by name."""
    if op not in OPS:
        raise ValueError(f"forward_op: unknown operation {op!r}")
    return OPS[op](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every requires_grad tensor.

    A second backward through the same graph is rejected rather than silently
    re-accumulating.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward: graph already consumed by a previous backward")
    loss._consumed = True
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backprop is not None and node.grad is not None:
            node._backprop(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()
