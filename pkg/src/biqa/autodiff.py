"""Reverse-mode automatic differentiation over dense NHWC tensors.

A forward pass runs inside a `Tape` context; every primitive that touches a
tensor requiring gradients appends a backward closure to the tape. Nodes are
appended in execution order, so walking the list in reverse is already a
reverse-topological traversal. `Tape.backward` seeds the output gradient and
replays the closures, accumulating into each tensor's `grad` slot.

Two precisions are supported: float32 for training, float64 for gradient
checking. Ops never change dtype.
"""

import os

import numpy as np

from biqa import kernels
from biqa.errors import (
    BatchTooSmall,
    InvalidRate,
    NonScalarOutput,
    ShapeMismatch,
    TapeConsumed,
)

# Checked after every forward primitive when BIQA_DEBUG=1.
_DEBUG = bool(os.environ.get("BIQA_DEBUG"))

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


class Tensor:
    """Dense N-dimensional array (row-major) plus a gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = np.float64 if arr.dtype == np.float64 else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


_ACTIVE_TAPE = None


class Tape:
    """Execution-ordered record of one forward pass.

    Single-threaded unit of work: one tape, one forward, one backward.
    A second backward on the same tape raises TapeConsumed.
    """

    def __init__(self):
        self._nodes = []  # (out, inputs, backward_fn)
        self._consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, output, seed_grad=None):
        """Propagate gradients from `output` back to every recorded input.

        `output` must be a single-element tensor unless `seed_grad` supplies
        an explicit upstream gradient (used to chain an analytically
        differentiated loss onto the recorded graph).
        """
        if self._consumed:
            raise TapeConsumed("tape already replayed; rebuild the forward pass")
        if seed_grad is None:
            if output.size != 1:
                raise NonScalarOutput(f"backward needs a scalar output, got shape {output.shape}")
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(seed_grad, dtype=output.dtype)
            if seed.shape != output.shape:
                raise ShapeMismatch(f"seed gradient {seed.shape} != output {output.shape}")
        self._consumed = True
        output.grad = seed.copy()

        produced = {id(out) for out, _, _ in self._nodes}
        for out, _, fn in reversed(self._nodes):
            if out.grad is not None:
                fn(out.grad)
        # Leaves that required gradients but got no contribution still end up
        # with a (zero) buffer of the right shape.
        for _, inputs, _ in self._nodes:
            for t in inputs:
                if t.requires_grad and id(t) not in produced and t.grad is None:
                    t.grad = np.zeros_like(t.data)


def _result(data, *inputs):
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = any(i.requires_grad for i in inputs)
    t.grad = None
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value in forward op output")
    return t


def _record(out, inputs, fn):
    if _ACTIVE_TAPE is not None and out.requires_grad:
        _ACTIVE_TAPE._nodes.append((out, inputs, fn))


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _reduce_to(g, shape):
    """Sum `g` down to `shape` (inverse of broadcasting; ranks already equal)."""
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_broadcast(a, b):
    if a.data.ndim != b.data.ndim:
        raise ShapeMismatch(f"rank mismatch: {a.shape} vs {b.shape}")
    for ea, eb in zip(a.shape, b.shape):
        if ea != eb and ea != 1 and eb != 1:
            raise ShapeMismatch(f"incompatible shapes: {a.shape} vs {b.shape}")


# --- elementwise ---

def relu(x):
    out = _result(np.maximum(x.data, 0), x)

    def bwd(g):
        _accum(x, g * (x.data > 0))

    _record(out, (x,), bwd)
    return out


def sigmoid(x):
    v = x.data
    s = np.empty_like(v)
    pos = v >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    s[~pos] = ev / (1.0 + ev)
    out = _result(s, x)

    def bwd(g):
        _accum(x, g * s * (1.0 - s))

    _record(out, (x,), bwd)
    return out


def add(a, b):
    _check_broadcast(a, b)
    out = _result(a.data + b.data, a, b)

    def bwd(g):
        _accum(a, _reduce_to(g, a.shape))
        _accum(b, _reduce_to(g, b.shape))

    _record(out, (a, b), bwd)
    return out


def mul(a, b):
    _check_broadcast(a, b)
    out = _result(a.data * b.data, a, b)

    def bwd(g):
        _accum(a, _reduce_to(g * b.data, a.shape))
        _accum(b, _reduce_to(g * a.data, b.shape))

    _record(out, (a, b), bwd)
    return out


def concat_last_axis(a, b):
    if a.data.ndim != b.data.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeMismatch(f"concat needs equal leading extents: {a.shape} vs {b.shape}")
    out = _result(np.concatenate([a.data, b.data], axis=-1), a, b)
    ca = a.shape[-1]

    def bwd(g):
        _accum(a, g[..., :ca])
        _accum(b, g[..., ca:])

    _record(out, (a, b), bwd)
    return out


# --- linear algebra ---

def dense(x, w, b):
    """out[n,k] = sum_j x[n,j] * w[j,k] + b[k]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"dense: x{x.shape} w{w.shape} b{b.shape}")
    out = _result(x.data @ w.data + b.data, x, w, b)

    def bwd(g):
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        _accum(b, g.sum(axis=0))

    _record(out, (x, w, b), bwd)
    return out


def conv2d_3x3(x, kernel, bias):
    """Zero-padded same-size 3x3 convolution over NHWC input."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"conv input must be rank 4, got {x.shape}")
    if kernel.data.ndim != 4 or kernel.shape[:2] != (3, 3) or kernel.shape[2] != x.shape[3]:
        raise ShapeMismatch(f"kernel {kernel.shape} does not fit input {x.shape}")
    if bias.shape != (kernel.shape[3],):
        raise ShapeMismatch(f"bias {bias.shape} vs output channels {kernel.shape[3]}")
    if not (x.dtype == kernel.dtype == bias.dtype):
        raise TypeError(f"mixed dtypes: {x.dtype}/{kernel.dtype}/{bias.dtype}")
    out = _result(kernels.conv2d_forward(x.data, kernel.data, bias.data), x, kernel, bias)

    def bwd(g):
        gx, gk, gb = kernels.conv2d_backward(x.data, kernel.data, np.ascontiguousarray(g))
        _accum(x, gx)
        _accum(kernel, gk)
        _accum(bias, gb)

    _record(out, (x, kernel, bias), bwd)
    return out


# --- pooling ---

def pool(x, kind, axes):
    """Global pooling: axes="spatial" -> (N,1,1,C); axes="channel" -> (N,H,W,1).

    Max pooling routes the gradient to the first maximum in row-major scan
    order, which is exactly argmax's tie rule.
    """
    if x.data.ndim != 4:
        raise ShapeMismatch(f"pool input must be rank 4, got {x.shape}")
    if kind not in ("avg", "max"):
        raise ValueError(f"unknown pool kind {kind!r}")
    if axes == "spatial":
        reduce_axes = (1, 2)
    elif axes == "channel":
        reduce_axes = (3,)
    else:
        raise ValueError(f"unknown pool axes {axes!r}")

    n, h, w, c = x.shape
    if kind == "avg":
        out = _result(x.data.mean(axis=reduce_axes, keepdims=True), x)
        count = h * w if axes == "spatial" else c

        def bwd(g):
            _accum(x, np.broadcast_to(g / count, x.shape))

    else:
        out = _result(x.data.max(axis=reduce_axes, keepdims=True), x)
        if axes == "spatial":
            flat = x.data.reshape(n, h * w, c)
            idx = flat.argmax(axis=1)  # (N,C), first max in (h,w) row-major order

            def bwd(g):
                gx = np.zeros((n, h * w, c), dtype=x.data.dtype)
                np.put_along_axis(gx, idx[:, None, :], g.reshape(n, 1, c), axis=1)
                _accum(x, gx.reshape(n, h, w, c))

        else:
            idx = x.data.argmax(axis=3)  # (N,H,W)

            def bwd(g):
                gx = np.zeros_like(x.data)
                np.put_along_axis(gx, idx[..., None], g, axis=3)
                _accum(x, gx)

    _record(out, (x,), bwd)
    return out


def maxpool2x2(x):
    """Non-overlapping 2x2 spatial max pooling (odd trailing row/col dropped)."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"maxpool2x2 input must be rank 4, got {x.shape}")
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeMismatch(f"spatial extents too small to pool: {x.shape}")
    win = (
        x.data[:, : 2 * h2, : 2 * w2, :]
        .reshape(n, h2, 2, w2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, h2, w2, 4, c)
    )
    idx = win.argmax(axis=3)  # first max in (dy,dx) row-major order
    out = _result(np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :], x)

    def bwd(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        gx = np.zeros_like(x.data)
        gx[:, : 2 * h2, : 2 * w2, :] = (
            gwin.reshape(n, h2, w2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h2, 2 * w2, c)
        )
        _accum(x, gx)

    _record(out, (x,), bwd)
    return out


# --- normalization / regularization ---

def batchnorm(x, gamma, beta, running_mean, running_var, mode,
              momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-feature batch normalization over rank-2 (N,F) activations.

    Train mode normalizes by batch statistics (variance denominator N) and
    updates the running buffers in place; eval mode normalizes by the running
    statistics. running_mean/running_var are plain float arrays, not tensors.
    """
    if x.data.ndim != 2:
        raise ShapeMismatch(f"batchnorm input must be rank 2, got {x.shape}")
    n, f = x.shape
    if gamma.shape != (f,) or beta.shape != (f,):
        raise ShapeMismatch(f"batchnorm params {gamma.shape}/{beta.shape} vs features {f}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")

    if mode == "train":
        if n < 2:
            raise BatchTooSmall(f"train-mode batchnorm needs at least 2 samples, got {n}")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        running_mean[:] = momentum * running_mean + (1.0 - momentum) * mu
        running_var[:] = momentum * running_var + (1.0 - momentum) * var
        out = _result(gamma.data * xhat + beta.data, x, gamma, beta)

        def bwd(g):
            dxhat = g * gamma.data
            s1 = dxhat.sum(axis=0)
            s2 = (dxhat * xhat).sum(axis=0)
            _accum(x, (inv / n) * (n * dxhat - s1 - xhat * s2))
            _accum(gamma, (g * xhat).sum(axis=0))
            _accum(beta, g.sum(axis=0))

    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv
        out = _result(gamma.data * xhat + beta.data, x, gamma, beta)

        def bwd(g):
            _accum(x, g * gamma.data * inv)
            _accum(gamma, (g * xhat).sum(axis=0))
            _accum(beta, g.sum(axis=0))

    _record(out, (x, gamma, beta), bwd)
    return out


def dropout(x, rate, mode, rng=None):
    """Inverted dropout: eval is the identity, train scales survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a seeded generator")
    scale = 1.0 / (1.0 - rate)
    mask = (rng.random(x.shape) >= rate).astype(x.data.dtype) * x.data.dtype.type(scale)
    out = _result(x.data * mask, x)

    def bwd(g):
        _accum(x, g * mask)

    _record(out, (x,), bwd)
    return out


# --- shape plumbing / reductions ---

def reshape(x, shape):
    data = x.data.reshape(shape)
    out = _result(data, x)
    orig = x.shape

    def bwd(g):
        _accum(x, g.reshape(orig))

    _record(out, (x,), bwd)
    return out


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def tsum(x):
    out = _result(x.data.sum(), x)

    def bwd(g):
        _accum(x, np.broadcast_to(g, x.shape))

    _record(out, (x,), bwd)
    return out


def tmean(x):
    out = _result(np.asarray(x.data.mean()), x)
    count = x.size

    def bwd(g):
        _accum(x, np.broadcast_to(g / count, x.shape))

    _record(out, (x,), bwd)
    return out


# --- parameters ---

class _Entry:
    __slots__ = ("tensor", "trainable", "m", "v")

    def __init__(self, tensor, trainable):
        self.tensor = tensor
        self.trainable = trainable
        self.m = None  # optimizer moment buffers, allocated on first step
        self.v = None


class ParamStore:
    """Ordered named collection of learnable arrays with gradient slots.

    Iteration order is insertion order, which makes optimizer updates and
    serialization deterministic. Non-trainable entries hold state such as
    normalization running statistics; they are serialized but never updated
    by the optimizer.
    """

    def __init__(self):
        self._items = {}

    def add(self, name, value, trainable=True):
        if name in self._items:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=trainable)
        self._items[name] = _Entry(t, trainable)
        return t

    def __getitem__(self, name):
        return self._items[name].tensor

    def __contains__(self, name):
        return name in self._items

    def __len__(self):
        return len(self._items)

    def names(self):
        return list(self._items)

    def entries(self):
        return self._items.items()

    def zero_grads(self):
        for e in self._items.values():
            e.tensor.grad = None

    def num_values(self):
        return sum(e.tensor.size for e in self._items.values())

    def snapshot(self):
        return {name: e.tensor.data.copy() for name, e in self._items.items()}

    def restore(self, values):
        for name, e in self._items.items():
            e.tensor.data[...] = values[name]


# --- gradient checking ---

def finite_diff_check(f, x, eps=1e-5):
    """Max relative error between the taped gradient of f at x and central
    finite differences, coordinate by coordinate.

    f must be a deterministic scalar-valued function of the tensor x.
    """
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        out = f(x)
        tape.backward(out)
    auto = (x.grad if x.grad is not None else np.zeros_like(x.data)).reshape(-1).astype(np.float64)

    flat = x.data.reshape(-1)
    num = np.empty(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).data.item()
        flat[i] = orig - eps
        fm = f(x).data.item()
        flat[i] = orig
        num[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(auto), np.abs(num)), 1e-8)
    return float(np.max(np.abs(auto - num) / denom))
