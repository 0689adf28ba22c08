"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable primitive records its parents and a closure mapping the
output gradient to one gradient per parent. ``backward`` orders the recorded
graph topologically and visits each node once, in reverse.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
from scipy.special import erf

_state = threading.local()


class ShapeError(ValueError):
    pass


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    # -- construction -----------------------------------------------------
    @staticmethod
    def _result(data, parents, backward, op):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self, grad=None):
        backward(self, grad=grad)

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(k for k, n in enumerate(shape) if n == 1 and grad.shape[k] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), back, "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), back, "mul")


def neg(a):
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    p = float(p)
    out = a.data ** p
    return Tensor._result(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def exp(a):
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def broadcast_to(a, shape):
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return Tensor._result(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a):
    """Exact GELU, ``x * Phi(x)``."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    out = x * cdf

    def back(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return Tensor._result(out, (a,), back, "gelu")


def dropout(a, rate, rng, training=True):
    if not training or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return Tensor._result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# -- linear algebra and reshaping -------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(out, (a, b), back, "matmul")


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return Tensor._result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index):
    out = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.array(out), (a,), back, "getitem")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._result(out, tuple(tensors), back, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis if axis >= 0 else axis + tensors[0].ndim + 1
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors], axis=ax)


# -- reductions ---------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return Tensor._result(np.asarray(out), (a,), lambda g: (_expand(g, a.shape, axis, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims=False):
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size / np.asarray(out).size

    def back(g):
        return (_expand(g, a.shape, axis, keepdims) / count,)

    return Tensor._result(np.asarray(out), (a,), back, "mean")


# -- normalised maps --------------------------------------------------------------

def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (a,), back, "softmax")


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (a,), back, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-12):
    """Normalise each vector along the last axis, then scale and shift."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        red = tuple(range(g.ndim - 1))
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor._result(out, (x, gain, bias), back, "layer_norm")


class BatchNormState:
    """Running statistics for one batch-norm layer (not trainable)."""

    def __init__(self, dim, momentum=0.1, eps=1e-5):
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, gain, bias, state: BatchNormState, training=True, update_stats=True):
    """Batch norm over axis 0 of a ``(batch, features)`` input.

    Training mode uses the biased batch variance and, when ``update_stats``,
    moves the running statistics by ``state.momentum`` (running variance uses
    the unbiased estimate). Inference mode is the affine map given by the
    running statistics.
    """
    if x.ndim != 2:
        raise ShapeError(f"batch_norm expects (batch, features), got {x.shape}")
    n = x.shape[0]
    if n == 0:
        raise ValueError("batch_norm needs a non-empty batch")
    if not training:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv
        out = xhat * gain.data + bias.data

        def back_eval(g):
            return g * gain.data * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

        return Tensor._result(out, (x, gain, bias), back_eval, "batch_norm_eval")
    if n < 2:
        raise ValueError("batch_norm in training mode needs at least 2 samples")
    mu = x.data.mean(axis=0)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    if update_stats and is_grad_enabled():
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var * n / (n - 1)

    def back(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return Tensor._result(out, (x, gain, bias), back, "batch_norm")


# -- lookup and likelihood -----------------------------------------------------------

def embedding(weight, ids):
    """Rows of ``weight`` selected by the integer array ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding ids out of range [0, {weight.shape[0]})")

    def back(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return Tensor._result(weight.data[ids], (weight,), back, "embedding")


def nll(logprobs, targets):
    """Mean negative log-likelihood of integer ``targets`` under ``(n, k)`` log-probabilities."""
    targets = np.asarray(targets, dtype=np.int64)
    if logprobs.ndim != 2 or targets.shape != (logprobs.shape[0],):
        raise ShapeError(f"nll: log-probs {logprobs.shape} vs targets {targets.shape}")
    n = targets.shape[0]
    if n == 0:
        raise ValueError("nll needs at least one target")
    rows = np.arange(n)
    out = -logprobs.data[rows, targets].mean()

    def back(g):
        full = np.zeros_like(logprobs.data)
        full[rows, targets] = -g / n
        return (full,)

    return Tensor._result(np.asarray(out), (logprobs,), back, "nll")


def cross_entropy(logits, targets):
    return nll(log_softmax(logits, axis=-1), targets)


# -- differentiation ---------------------------------------------------------------------

def topological_order(root):
    order, seen = [], set()
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, params=None, grad=None):
    """Accumulate ``d loss / d leaf`` into every reachable leaf's ``grad``.

    ``loss`` must be a scalar unless an explicit output ``grad`` is given.
    Leaves listed in ``params`` that the loss does not reach get a zero
    gradient if they had none.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if params is not None:
        for p in params:
            if p.grad is None:
                p.zero_grad()
    if not loss.requires_grad:
        return
    grads = {id(loss): np.asarray(grad, dtype=np.float64)}
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
            grads[key] = pg if key not in grads else grads[key] + pg
