"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient, the output keeps references to its inputs together with a local
gradient rule; :func:`backward` walks that record in reverse topological
order and accumulates gradients into the leaf tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised on misuse of the computation record (e.g. non-scalar backward)."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum a broadcast gradient back down to the operand's shape
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "grad_fn", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.grad_fn: Callable | None = None
        self.op = "leaf"

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

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

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.grad_fn = grad_fn
    else:
        out.requires_grad = False
        out.parents = ()
        out.grad_fn = None
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data / b.data, (a, b), grad_fn, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sin(x: Tensor) -> Tensor:
    return _node(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),), "sin")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free and gives exactly 0.5 at 0
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), grad_fn, "softmax")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,), "clip")


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "softmax": softmax, "softmax_lastdim": softmax}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _node(np.broadcast_to(x.data, shape).copy(), (x,),
                 lambda g: (_unbroadcast(g, x.shape),), "broadcast")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, grad_fn, "concat")


def getitem(x: Tensor, index) -> Tensor:
    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(x.data[index], (x,), grad_fn, "getitem")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), grad_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis, keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(np.matmul(a.data, b.data), (a, b), grad_fn, "matmul")


def dense_forward(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` over the trailing axis of ``x``; leading axes broadcast."""
    x = as_tensor(x)
    if W.ndim != 2 or b.shape != (W.shape[1],) or x.ndim < 1 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"dense shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    if x.ndim == 1:
        return reshape(matmul(reshape(x, (1, -1)), W) + b, (W.shape[1],))
    return matmul(x, W) + b


# ---------------------------------------------------------------------------
# normalization


@dataclass
class NormStats:
    """Running statistics for batch / power normalization (per feature)."""

    mean: np.ndarray
    var: np.ndarray
    quad: np.ndarray
    momentum: float = 0.9

    @classmethod
    def create(cls, width: int, momentum: float = 0.9) -> NormStats:
        return cls(np.zeros(width), np.ones(width), np.ones(width), momentum)

    def copy(self) -> NormStats:
        return NormStats(self.mean.copy(), self.var.copy(), self.quad.copy(), self.momentum)


def _standardize(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple) -> Tensor:
    # (x - mean) / sqrt(var + eps) with batch statistics over `axes`, fused backward
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + EPS)
    xhat = centered * inv
    out = gamma.data * xhat + beta.data

    def grad_fn(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _node(out, (x, gamma, beta), grad_fn, "standardize")


def _scale_shift(x: Tensor, gamma: Tensor, beta: Tensor, shift: np.ndarray, scale: np.ndarray,
                 op: str) -> Tensor:
    # gamma * (x - shift) * scale + beta with shift/scale held constant
    xhat = (x.data - shift) * scale
    out = gamma.data * xhat + beta.data

    def grad_fn(g):
        return g * gamma.data * scale, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _node(out, (x, gamma, beta), grad_fn, op)


def normalize(x: Tensor, kind: str, gamma: Tensor, beta: Tensor,
              stats: NormStats | None = None, training: bool = False) -> Tensor:
    """Normalize ``x`` whose last axis holds the features.

    ``layer`` standardizes each row over the last axis. ``batch`` standardizes
    each feature over every other axis in training and uses running moments in
    eval mode. ``power`` divides each feature by the square root of a running
    quadratic mean without subtracting any mean; in training the running value
    is refreshed from the current batch first and then treated as a constant.
    """
    if x.ndim < 2:
        raise ShapeError(f"normalize needs at least 2 dimensions, got {x.shape}")
    if kind == "layer":
        return _standardize(x, gamma, beta, (-1,))
    if stats is None:
        raise ValueError(f"{kind} normalization needs running statistics")
    axes = tuple(range(x.ndim - 1))
    m = stats.momentum
    if kind == "batch":
        if training:
            batch_mean = x.data.mean(axis=axes)
            batch_var = x.data.var(axis=axes)
            stats.mean[...] = m * stats.mean + (1.0 - m) * batch_mean
            stats.var[...] = m * stats.var + (1.0 - m) * batch_var
            return _standardize(x, gamma, beta, axes)
        return _scale_shift(x, gamma, beta, stats.mean, 1.0 / np.sqrt(stats.var + EPS), "batch_norm")
    if kind == "power":
        if training:
            batch_quad = (x.data * x.data).mean(axis=axes)
            stats.quad[...] = m * stats.quad + (1.0 - m) * batch_quad
        return _scale_shift(x, gamma, beta, 0.0, 1.0 / np.sqrt(stats.quad + EPS), "power_norm")
    raise ValueError(f"unknown normalization {kind!r}")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# reverse mode


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after all of its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not connected to any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check_params(loss_fn: Callable[[], Tensor], params: Iterable[Tensor],
                      h: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of ``loss_fn()`` against central differences.

    Each coordinate of each tensor in ``params`` is perturbed in place by
    ``±h``. The relative error of a coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``. The floor
    keeps float64 roundoff in the differences (about 1e-11 for an O(1) loss
    at h=1e-5) from reading as a large relative error on near-zero entries.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss_fn())
    max_rel = max_abs = 0.0
    n = 0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, err / max(abs(a), abs(numeric), floor))
            n += 1
    return GradCheckReport(max_rel, max_abs, n, tol)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, tol: float = 1e-6,
               floor: float = 1e-8) -> GradCheckReport:
    x.requires_grad = True
    return grad_check_params(lambda: f(x), [x], h=h, tol=tol, floor=floor)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = True) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)
