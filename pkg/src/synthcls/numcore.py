"""Minimal tensor algebra with reverse-mode autodiff, AdamW, and LR schedules.

Storage is float32; reductions accumulate in float64 before casting back.
The tape is rebuilt on every forward pass (define-by-run): each operation
that touches a gradient-requiring tensor records a backward closure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested kernel."""


class NumericError(ArithmeticError):
    """A non-finite value was encountered where finiteness is required."""


def _as_f32(data):
    arr = np.asarray(data, dtype=np.float32)
    return arr


class Tensor:
    """Dense row-major float32 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = _as_f32(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accum_grad(self, g):
        g = _as_f32(g)
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} vs value shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    # -- operator sugar ----------------------------------------------------
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

    def reshape(self, *shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def item(self):
        return float(self.data.reshape(-1)[0])


class Parameter(Tensor):
    """Trainable tensor with a name for optimizer diagnostics."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name="param", trainable=True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def set_trainable(self, flag):
        self.trainable = bool(flag)
        self.requires_grad = bool(flag)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape}, trainable={self.trainable})"


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# -- elementwise kernels ---------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), backward)


def texp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        return (g * data,)

    return _make(data, (a,), backward)


def tlog(a):
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _make(data, (a,), backward)


def tsqrt(a):
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / data,)

    return _make(data, (a,), backward)


def tpow(a, p):
    a = as_tensor(a)
    p = float(p)
    data = a.data ** np.float32(p)

    def backward(g):
        return (g * p * a.data ** np.float32(p - 1.0),)

    return _make(data, (a,), backward)


def relu(a):
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (a.data > 0.0),)

    return _make(data, (a,), backward)


# -- reductions (float64 accumulation) -------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(np.float32)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(np.float32),)
        g2 = g
        if not keepdims:
            g2 = np.expand_dims(g2, axis)
        return (np.broadcast_to(g2, a.shape).astype(np.float32),)

    return _make(data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tmax_const(a, axis=None, keepdims=False):
    """Max over axis, treated as a constant (no gradient). Used for the
    numerically stable softmax shift, which the gradient does not see."""
    a = as_tensor(a)
    return a.data.max(axis=axis, keepdims=keepdims)


# -- structural kernels ----------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return _make(data, (a,), backward)


def transpose(a, axes=None):
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(data, (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tensors, backward)


def take_rows(a, indices):
    """Row gather along axis 0 (embedding lookup); backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    data = a.data[idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(data, (a,), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    data = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(data, (a, b), backward)


# -- 2-D convolution and pooling (NCHW, stride 1) --------------------------

def _im2col(x, kh, kw, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = h + 2 * pad - kh + 1
    ow = w + 2 * pad - kw + 1
    s = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x, (n, c, kh, kw, oh, ow), (s[0], s[1], s[2], s[3], s[2], s[3]))
    # (n, oh, ow, c*kh*kw)
    return np.ascontiguousarray(cols.transpose(0, 4, 5, 1, 2, 3)).reshape(n * oh * ow, c * kh * kw), oh, ow


def _col2im(cols, x_shape, kh, kw, pad, oh, ow):
    n, c, h, w = x_shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + oh, j:j + ow] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad:-pad, pad:-pad]
    return xp


def conv2d(x, weight, bias=None, pad=1):
    """2-D convolution, stride 1. x: (N,C,H,W), weight: (F,C,kh,kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: shapes {x.shape} and {weight.shape} do not conform")
    n, c, h, w = x.shape
    f, _, kh, kw = weight.shape
    cols, oh, ow = _im2col(x.data, kh, kw, pad)
    wmat = weight.data.reshape(f, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, f, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, f)
        gw = (gmat.T @ cols).reshape(f, c, kh, kw)
        gcols = gmat @ wmat
        gx = _col2im(gcols, x.shape, kh, kw, pad, oh, ow)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out.astype(np.float32), parents, backward)


def avg_pool2d(x, k=2):
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial extent {(h, w)} not divisible by {k}")
    data = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx.astype(np.float32),)

    return _make(data, (x,), backward)


def max_pool2d(x, k=2):
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"max_pool2d: spatial extent {(h, w)} not divisible by {k}")
    # (n, c, oh, ow, kh, kw)
    windows = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    data = windows.max(axis=(4, 5))
    # break ties: keep only the first max per window
    flat = windows.reshape(-1, k * k)
    first = np.argmax(flat, axis=1)
    onehot = np.zeros((first.size, k * k), dtype=np.float32)
    onehot[np.arange(first.size), first] = 1.0
    onehot = onehot.reshape(n, c, h // k, w // k, k, k)

    def backward(g):
        gx = onehot * g[:, :, :, :, None, None]
        gx = gx.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx.astype(np.float32),)

    return _make(data, (x,), backward)


# -- composites ------------------------------------------------------------

def softmax(logits, axis=-1):
    """Softmax along `axis`; positive, sums to one, shift-invariant."""
    logits = as_tensor(logits)
    if logits.shape == () or logits.shape[axis] == 0:
        raise ShapeError(f"softmax: empty axis {axis} for shape {logits.shape}")
    shift = tmax_const(logits, axis=axis, keepdims=True)
    e = texp(sub(logits, Tensor(shift)))
    return div(e, tsum(e, axis=axis, keepdims=True))


def log_softmax(logits, axis=-1):
    logits = as_tensor(logits)
    shift = tmax_const(logits, axis=axis, keepdims=True)
    z = sub(logits, Tensor(shift))
    return sub(z, tlog(tsum(texp(z), axis=axis, keepdims=True)))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels. logits: (N, k)."""
    logits = as_tensor(logits)
    n = logits.shape[0]
    logp = log_softmax(logits, axis=1)
    picked = take_rows(reshape(logp, (-1,)),
                       np.arange(n) * logits.shape[1] + np.asarray(labels, dtype=np.int64))
    return mul(tsum(picked), -1.0 / n)


# -- backward pass ---------------------------------------------------------

def backward(root):
    """Populate .grad on every gradient-requiring tensor reachable from root.

    Repeated calls without zeroing accumulate. The root must be scalar.
    """
    root = as_tensor(root)
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")

    topo, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    root._accum_grad(np.ones_like(root.data))
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if parent.requires_grad and g is not None:
                parent._accum_grad(g)
        if node is not root and not isinstance(node, Parameter):
            node.grad = None  # free intermediate buffers


# -- optimizer and schedule ------------------------------------------------

@dataclass
class LrSchedule:
    """Learning-rate schedule: constant, or half-cosine decay to zero."""
    base_rate: float
    total_steps: int
    kind: str = "cosine"


def cosine_lr(step, sched: LrSchedule):
    if sched.kind == "constant":
        return sched.base_rate
    s = min(max(step, 0), sched.total_steps)
    return sched.base_rate * 0.5 * (1.0 + math.cos(math.pi * s / sched.total_steps))


class AdamW:
    """Decoupled-weight-decay Adam over a list of Parameters.

    Gradients are zeroed after each step; non-trainable parameters are
    never touched. A non-finite gradient aborts the step.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {id(p): np.zeros_like(p.data) for p in self.params}
        self._v = {id(p): np.zeros_like(p.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for p in self.params:
            if not p.trainable:
                continue
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter '{p.name}'")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            if not p.trainable:
                p.grad = None
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self._m[id(p)]
            v = self._v[id(p)]
            m[...] = b1 * m + (1 - b1) * g
            v[...] = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p.data = p.data - lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)
            p.grad = None
        return self


def adamw_step(params, opt: AdamW, lr):
    """One optimizer step at an explicit rate (schedule-driven loops)."""
    return opt.step(lr=lr)
