"""Dense tensors with reverse-mode automatic differentiation.

Row-major float32 by default; an opt-in float64 mode exists so gradient
checks can run at tight tolerances. Every forward op validates that its
output is finite -- a NaN/Inf is raised as NonFiniteError, never returned
silently. Gradients are only materialized along paths that reach a
trainable Param.
"""

from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32
CHECK_FINITE = True

MASK_BIAS = -1e9


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(RuntimeError):
    """A forward op produced NaN or Inf."""


class MaskError(ValueError):
    """An attention mask leaves some query row with no attendable key."""


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the dtype used for newly created constants."""
    global DEFAULT_DTYPE
    saved = DEFAULT_DTYPE
    DEFAULT_DTYPE = dtype
    try:
        yield
    finally:
        DEFAULT_DTYPE = saved


def _check_finite(data, op_name):
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op_name} produced non-finite values")


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_edges")

    def __init__(self, data, edges=(), requires_grad=None, op_name="tensor"):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=DEFAULT_DTYPE)
        _check_finite(self.data, op_name)
        self.grad = None
        # edges: ((parent, grad_fn), ...) kept only for parents that need grads
        self._edges = edges
        if requires_grad is None:
            requires_grad = bool(edges)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._edges:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            g = node.grad
            for parent, grad_fn in node._edges:
                if parent.requires_grad:
                    parent._accum(grad_fn(g))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # convenience arithmetic used sparingly in model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__


class Param(Tensor):
    """A named, possibly trainable leaf tensor.

    When trainable is False the value must stay bit-identical for the life
    of a training run; the trainer asserts this by checksum.
    """

    __slots__ = ("name", "trainable")

    def __init__(self, data, name, trainable=True):
        super().__init__(np.ascontiguousarray(data, dtype=DEFAULT_DTYPE))
        self.name = name
        self.trainable = trainable
        self.requires_grad = trainable

    def freeze(self):
        self.trainable = False
        self.requires_grad = False

    def zero_grad(self):
        self.grad = None

    def checksum(self):
        return hashlib.sha256(self.data.tobytes()).hexdigest()


def tensor(data):
    """Wrap a constant (no gradient) value."""
    return Tensor(np.asarray(data, dtype=DEFAULT_DTYPE), requires_grad=False)


def _edges(pairs):
    return tuple((p, fn) for p, fn in pairs if p.requires_grad)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gdim, sdim) in enumerate(zip(g.shape, shape)):
        if sdim == 1 and gdim != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return Tensor(out, _edges([
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ]), op_name="add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    return Tensor(out, _edges([
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ]), op_name="sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return Tensor(out, _edges([
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ]), op_name="mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor(a.data * s, _edges([(a, lambda g: g * s)]), op_name="scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def ga(g):
        bt = np.swapaxes(b.data, -1, -2) if b.ndim > 1 else b.data[None, :]
        return _unbroadcast(np.matmul(g, bt), a.shape)

    def gb(g):
        at = np.swapaxes(a.data, -1, -2)
        return _unbroadcast(np.matmul(at, g), b.shape)

    return Tensor(out, _edges([(a, ga), (b, gb)]), op_name="matmul")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor(np.transpose(a.data, axes),
                  _edges([(a, lambda g: np.transpose(g, inv))]),
                  op_name="transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return Tensor(np.reshape(a.data, shape),
                  _edges([(a, lambda g: np.reshape(g, old))]),
                  op_name="reshape")


def concat(tensors, axis=0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    pairs = []
    for i, t in enumerate(tensors):
        lo, hi = offsets[i], offsets[i + 1]

        def grad_fn(g, lo=lo, hi=hi):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        pairs.append((t, grad_fn))
    return Tensor(out, _edges(pairs), op_name="concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return full

    return Tensor(a.data[index], _edges([(a, grad_fn)]), op_name="narrow")


def gather_rows(table: Tensor, idx) -> Tensor:
    """Embedding lookup: out[..., :] = table[idx[...], :]."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for table of {table.shape[0]} rows")
    out = table.data[idx]

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return gt

    return Tensor(out, _edges([(table, grad_fn)]), op_name="gather_rows")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th ** 2) * dinner)

    return Tensor(out, _edges([(x, grad_fn)]), op_name="gelu")


def softmax(x: Tensor, axis=-1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return Tensor(out, _edges([(x, grad_fn)]), op_name="softmax")


def log_softmax(x: Tensor, axis=-1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        return g - np.exp(out) * g.sum(axis=axis, keepdims=True)

    return Tensor(out, _edges([(x, grad_fn)]), op_name="log_softmax")


def pick(x: Tensor, idx) -> Tensor:
    """out[...] = x[..., idx[...]] along the last axis (for cross-entropy)."""
    idx = np.asarray(idx)
    lead = np.ix_(*[np.arange(s) for s in idx.shape]) if idx.ndim else ()
    out = x.data[lead + (idx,)] if idx.ndim else x.data[idx]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        if idx.ndim:
            np.add.at(gx, lead + (idx,), g)
        else:
            gx[idx] = g
        return gx

    return Tensor(out, _edges([(x, grad_fn)]), op_name="pick")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm: eps must be > 0")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: affine shape {gain.shape} does not match feature dim {x.shape[-1:]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def gx(g):
        gh = g * gain.data
        return inv * (gh - gh.mean(axis=-1, keepdims=True)
                      - xhat * (gh * xhat).mean(axis=-1, keepdims=True))

    def ggain(g):
        return _unbroadcast(g * xhat, gain.shape)

    def gbias(g):
        return _unbroadcast(g, bias.shape)

    return Tensor(out, _edges([(x, gx), (gain, ggain), (bias, gbias)]), op_name="layer_norm")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype),
                  _edges([(x, lambda g: np.broadcast_to(g, shape).astype(g.dtype))]),
                  op_name="sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return Tensor(np.asarray(x.data.mean(), dtype=x.data.dtype),
                  _edges([(x, lambda g: np.broadcast_to(g / n, shape).astype(g.dtype))]),
                  op_name="mean")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b). x: [..., d_in], w: [d_in, d_out], b: [d_out]."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape} does not match weight {w.shape}")
    out = matmul(x, w)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match weight {w.shape}")
        out = add(out, b)
    return out


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """Scaled dot-product attention.

    q: [B,H,S,d], k/v: [B,H,T,d], mask: optional bool [S,T] (True = attend).
    Masked-out logits get a -1e9 bias; a fully masked row is an error.
    """
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape:
        raise ShapeError(f"attention: incompatible shapes q={q.shape} k={k.shape} v={v.shape}")
    d = q.shape[-1]
    scores = scale(matmul(q, _kt(k)), 1.0 / math.sqrt(d))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (q.shape[-2], k.shape[-2]):
            raise ShapeError(f"attention: mask shape {mask.shape} does not match (S,T)=({q.shape[-2]},{k.shape[-2]})")
        if not mask.any(axis=-1).all():
            raise MaskError("attention: some query row has every key masked out")
        bias = np.where(mask, 0.0, MASK_BIAS).astype(scores.data.dtype)
        scores = add(scores, tensor(bias))
    attn = softmax(scores, axis=-1)
    return matmul(attn, v)


def _kt(k: Tensor) -> Tensor:
    axes = list(range(k.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(k, axes)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = sub(a, b)
    return mean_all(mul(diff, diff))


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer targets; optional 0/1 mask."""
    lp = log_softmax(logits, axis=-1)
    picked = pick(lp, np.asarray(targets))
    if mask is None:
        return scale(mean_all(picked), -1.0)
    m = np.asarray(mask, dtype=lp.data.dtype)
    total = float(m.sum())
    if total == 0:
        raise ValueError("cross_entropy: mask selects no positions")
    return scale(sum_all(mul(picked, tensor(m))), -1.0 / total)
