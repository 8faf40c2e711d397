"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records a closure that pushes the upstream gradient to its parents;
``Tensor.backward`` walks the graph in reverse topological order. Broadcasting
follows numpy rules and gradients are summed back to the parent shape.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_STATE = threading.local()


def grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only, per thread)."""
    prev = grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph.

    ``data`` always holds a float64 ndarray. ``grad`` is allocated lazily on
    the first backward pass that reaches the tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = _op
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        tag = f", op={self.op!r}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from a scalar. Gradients accumulate across calls."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        # intermediate grads are scratch space; leaves keep and accumulate theirs
        upstream: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = upstream.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
            else:
                node._backward(g, upstream)

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True, _parents=tuple(parents), _op=op)

        def push(g, upstream, _fn=backward, _parents=out._parents):
            for parent, pg in zip(_parents, _fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if parent._backward is None:
                    parent._accumulate(pg)
                elif key in upstream:
                    upstream[key] = upstream[key] + _unbroadcast(pg, parent.data.shape)
                else:
                    upstream[key] = _unbroadcast(pg, parent.data.shape)

        out._backward = push
        return out
    return Tensor(data, _op=op)


# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b), "div", lambda g: (g / bd, -g * ad / (bd * bd)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), "exp", lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), "log", lambda g: (g / xd,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), "tanh", lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), "relu", lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), "gelu", backward)


# reductions and shape

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), "sum", backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.data.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.data.shape
    return _make(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), "transpose",
                 lambda g: (np.transpose(g, inv),))


def take(x: Tensor, index) -> Tensor:
    """Basic or fancy indexing; repeated indices accumulate in backward."""
    shape = x.data.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), "take", backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    shape = table.data.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _make(table.data[ids], (table,), "embedding", backward)


# linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching over leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), "matmul", backward)


# normalisers and losses

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilised softmax. ``mask`` (broadcastable bool, True = keep)
    sends excluded logits to exactly zero probability."""
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    shifted = xd - np.max(xd, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), "softmax", backward)


def log_softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    shifted = xd - np.max(xd, axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        g = np.where(np.isfinite(out), g, 0.0)
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), "log_softmax", backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = xd.shape[-1]

    def backward(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, g * xhat, g

    if n < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    return _make(out, (x, gain, bias), "layer_norm", backward)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Negative log-likelihood of integer ``targets`` under softmax(logits).

    ``logits`` is (n, V). Without ``weights`` the mean over rows is returned;
    with ``weights`` (length n) the weighted sum, which lets callers pick any
    normalisation and zero out padding rows.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n, vocab = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if n and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target index out of range [0, {vocab})")
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    xd = logits.data
    shifted = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    logp = shifted - np.log(z)
    rows = np.arange(n)
    loss = -(w * logp[rows, targets]).sum()

    def backward(g):
        grad = e / z
        grad[rows, targets] -= 1.0
        return (g * grad * w[:, None],)

    return _make(np.asarray(loss), (logits,), "cross_entropy", backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# optimisation

def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.
    Returns the norm before clipping."""
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: dict,
              lr, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place.

    ``lr`` is a float or a per-parameter sequence (parameter groups).
    ``state`` holds ``"step"`` and the moment lists ``"m"``/``"v"``; an
    empty dict is initialised on first use. Updated in place.
    """
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    lrs = [lr] * len(params) if np.isscalar(lr) else list(lr)
    if not state:
        state.update(step=0, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"param shape {p.shape} != grad shape {g.shape}")
        m, v = state["m"][k], state["v"][k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lrs[k] * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    """Adam over named parameter groups, e.g. ``{"encoder": (params, 4e-5)}``."""

    def __init__(self, groups: dict[str, tuple[list[Tensor], float]],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.groups = groups
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.params = [p for ps, _ in groups.values() for p in ps]
        self.lrs = [lr for ps, lr in groups.values() for _ in ps]
        self.state = {"step": 0,
                      "m": [np.zeros_like(p.data) for p in self.params],
                      "v": [np.zeros_like(p.data) for p in self.params]}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, self.lrs,
                  self.beta1, self.beta2, self.eps)


# verification

def numerical_grad(fn: Callable[[], float], tensor: Tensor, h: float = 1e-5,
                   indices: Iterable[tuple] | None = None) -> dict[tuple, float]:
    """Central finite differences of a scalar function w.r.t. entries of ``tensor``."""
    flat = tensor.data.reshape(-1)
    if indices is None:
        indices = [np.unravel_index(k, tensor.shape) for k in range(flat.size)]
    out = {}
    for idx in indices:
        k = int(np.ravel_multi_index(idx, tensor.shape)) if tensor.ndim else 0
        orig = flat[k]
        flat[k] = orig + h
        up = fn()
        flat[k] = orig - h
        down = fn()
        flat[k] = orig
        out[tuple(int(i) for i in np.atleast_1d(idx))] = (up - down) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, zero: float = 1e-7) -> float:
    """max|a - n| scaled by the larger of the two gradients' max magnitude.

    When both gradients are below ``zero`` (e.g. an attention key bias, whose
    true gradient vanishes by softmax shift invariance) the absolute
    difference is returned instead, since the ratio would only measure
    finite-difference noise.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = float(np.abs(analytic - numeric).max(initial=0.0))
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    return diff if scale < zero else diff / scale


def gradcheck(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor], h: float = 1e-5,
              max_entries: int | None = None, rng: np.random.Generator | None = None
              ) -> dict[str, float]:
    """Compare backprop against central differences for each named tensor.

    ``loss_fn`` must rebuild the graph from the current tensor values on every
    call. With ``max_entries`` a random subset of each tensor is probed.
    Returns the relative error per tensor name.
    """
    for t in tensors.values():
        t.grad = None
    loss_fn().backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in tensors.items()}

    def value():
        with no_grad():
            return float(loss_fn().data)

    errors = {}
    for name, t in tensors.items():
        size = t.data.size
        if max_entries is not None and size > max_entries:
            rng = rng or np.random.default_rng(0)
            picks = rng.choice(size, size=max_entries, replace=False)
            idxs = [np.unravel_index(k, t.shape) for k in sorted(picks)]
        else:
            idxs = [np.unravel_index(k, t.shape) for k in range(size)]
        num = numerical_grad(value, t, h, idxs)
        a = np.array([analytic[name][idx] for idx in idxs])
        n = np.array([num[tuple(int(i) for i in np.atleast_1d(idx))] for idx in idxs])
        errors[name] = relative_error(a, n)
    return errors
