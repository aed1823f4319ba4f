"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Only the operations needed by the ViT graph are provided. Every op is a
plain function that takes and returns :class:`Tensor`; when a :class:`Tape`
is active and any input requires gradients, the op records a pullback.

    with Tape() as tape:
        y = matmul(x, w)
        loss = mean(y)
    backward(loss, tape)
    w.grad
"""

from __future__ import annotations

import math

import numpy as np

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of differentiable operations.

    Records are appended in execution order, which is a valid topological
    order; :func:`backward` walks them in exact reverse. A tape can be
    consumed once.
    """

    def __init__(self):
        self.records = []
        self.consumed = False

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def reset(self):
        self.records = []
        self.consumed = False


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(inputs, output, pullback):
    if not _ACTIVE_TAPES or not any(t.requires_grad for t in inputs):
        return output
    output.requires_grad = True
    _ACTIVE_TAPES[-1].records.append((inputs, output, pullback))
    return output


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss, tape):
    """Propagate d(loss)/d(.) to every tensor recorded on ``tape``.

    Gradients are accumulated additively into ``.grad`` of each tensor with
    ``requires_grad``; leaves that already hold a gradient keep summing.
    """
    if tape.consumed:
        raise RuntimeError("tape already consumed by backward(); call tape.reset() and re-run forward")
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape.consumed = True
    grads = {id(loss): np.ones_like(loss.data)}
    for inputs, output, pullback in reversed(tape.records):
        g = grads.pop(id(output), None)
        if g is None:
            continue
        _store(output, g)
        for inp, gi in zip(inputs, pullback(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # whatever is left belongs to leaves (tensors never produced by an op)
    leaves = {id(t): t for inputs, _, _ in tape.records for t in inputs}
    for key, g in grads.items():
        if key in leaves:
            _store(leaves[key], g)
        elif key == id(loss):
            _store(loss, g)


def _store(t, g):
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)
    out = Tensor(a.data + b.data)

    def pullback(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record((a, b), out, pullback)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)
    out = Tensor(a.data - b.data)

    def pullback(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record((a, b), out, pullback)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)
    out = Tensor(a.data * b.data)

    def pullback(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record((a, b), out, pullback)


def scale(x, c):
    """Multiply by a Python constant."""
    out = Tensor(x.data * c)
    return _record((x,), out, lambda g: (g * c,))


def gelu(x):
    """Tanh approximation of GELU."""
    k = math.sqrt(2.0 / math.pi)
    d = x.data
    sq = d * d
    t = np.tanh(k * d * (1.0 + 0.044715 * sq))
    out = Tensor(0.5 * d * (1.0 + t))

    def pullback(g):
        du = k * (1.0 + 3 * 0.044715 * sq)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * du),)

    return _record((x,), out, pullback)


def sigmoid(x):
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    out = Tensor(y)
    return _record((x,), out, lambda g: (g * y * (1.0 - y),))


def dropout(x, rate, training, rng=None):
    """Inverted dropout; the identity outside training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    out = Tensor(x.data * keep)
    return _record((x,), out, lambda g: (g * keep,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b, a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.data.ndim == 2 and a.data.ndim > 2:
        return _matmul_flat(a, b)
    out = Tensor(a.data @ b.data)

    def pullback(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record((a, b), out, pullback)


def _matmul_flat(a, b):
    # (..., k) @ (k, n) as one 2-D GEMM; much faster than numpy's stacked path
    k, n = b.shape
    a2 = a.data.reshape(-1, k)
    out = Tensor((a2 @ b.data).reshape(a.shape[:-1] + (n,)))

    def pullback(g):
        g2 = g.reshape(-1, n)
        return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

    return _record((a, b), out, pullback)


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))
    return _record((x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    inv = np.argsort(axes)
    out = Tensor(np.transpose(x.data, axes))
    return _record((x,), out, lambda g: (np.transpose(g, inv),))


# ---------------------------------------------------------------- reductions

def sum_(x, axis=None, keepdims=False):
    out = Tensor(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)))

    def pullback(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record((x,), out, pullback)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- fused ops

def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def pullback(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record((x,), out, pullback)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize over the last axis then apply the affine (gamma, beta)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def pullback(g):
        gx_hat = g * gamma.data
        d = x.shape[-1]
        gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record((x, gamma, beta), out, pullback)


def binary_cross_entropy(probs, target, clamp=1e-7):
    """Mean over every element of -[t log p + (1-t) log(1-p)].

    ``probs`` is clipped to [clamp, 1 - clamp]; the clipped region passes no
    gradient, as with any clip.
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=probs.dtype)
    if target.shape != probs.shape:
        raise ValueError(f"target shape {target.shape} != probs shape {probs.shape}")
    p = np.clip(probs.data, clamp, 1.0 - clamp)
    n = p.size
    loss = -(target * np.log(p) + (1.0 - target) * np.log1p(-p)).sum() / n
    out = Tensor(np.asarray(loss, dtype=probs.dtype))
    inside = (probs.data >= clamp) & (probs.data <= 1.0 - clamp)

    def pullback(g):
        dp = (-(target / p) + (1.0 - target) / (1.0 - p)) / n
        return (g * dp * inside,)

    return _record((probs,), out, pullback)
