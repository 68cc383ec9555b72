"""Dense float64 tensors with a small reverse-mode autodiff tape.

Only the operations the network needs are provided.  Differentiable ops are
recorded on the innermost active :class:`Tape`; outside any tape nothing is
recorded, which is how inference runs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, StateError, UsageError

DTYPE = np.float64

_tapes: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
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

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.item())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # arithmetic sugar
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
            raise UsageError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_pool(self, axis, keepdims)


class Parameter(Tensor):
    """Learnable tensor.  ``grad`` always exists and matches ``data`` in shape."""

    __slots__ = ("trainable", "decay")

    def __init__(self, data, trainable=True, decay=True, name=None):
        super().__init__(data, requires_grad=trainable, name=name)
        self.trainable = trainable
        self.decay = decay
        self.grad = np.zeros_like(self.data)

    @property
    def value(self):
        return self.data

    def zero_grad(self):
        self.grad[...] = 0.0

    def set_trainable(self, flag):
        self.trainable = flag
        self.requires_grad = flag


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    out: Tensor
    inputs: tuple
    backward: Callable


@dataclass
class Tape:
    """Ordered record of differentiable ops executed while the tape is active."""

    nodes: list = field(default_factory=list)
    visited: list = field(default_factory=list)

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def ops(self):
        return [n.op for n in self.nodes]


def current_tape():
    return _tapes[-1] if _tapes else None


def _result(op, data, inputs, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(op, out, tuple(inputs), backward))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor, tape: Tape | None = None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = current_tape()
    if tape is None:
        raise UsageError("backward needs the tape the loss was recorded on")
    grads = {id(loss): np.ones_like(loss.data)}
    produced = set()
    tape.visited = []
    for i in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[i]
        produced.add(id(node.out))
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        tape.visited.append(i)
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    leaves = {}
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and id(inp) not in produced:
                leaves[id(inp)] = inp
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = g.reshape(leaf.shape)
        if leaf.grad is None:
            leaf.grad = np.array(g, dtype=DTYPE)
        else:
            leaf.grad += g


# --- elementwise -----------------------------------------------------------

def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result("mul", a.data * b.data, (a, b), bw)


def neg(a):
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def relu(x):
    y = np.maximum(x.data, 0.0)
    return _result("relu", y, (x,), lambda g: (g * (y > 0),))


def log(x):
    return _result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x):
    y = np.exp(x.data)
    return _result("exp", y, (x,), lambda g: (g * y,))


# --- reductions and reshaping ----------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def sum_(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _result("sum", y, (x,), bw)


def mean_pool(x, axes=None, keepdims=False):
    """Arithmetic mean over ``axes`` (all axes when None)."""
    axes = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    y = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _result("mean_pool", y, (x,), bw)


def reshape(x, shape):
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return _result("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _result("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x, idx):
    y = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result("getitem", np.array(y, dtype=DTYPE), (x,), bw)


def concat(xs: Sequence[Tensor], axis=0):
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat of an empty list")
    nd = xs[0].ndim
    ax = _norm_axes(axis, nd)[0]
    for x in xs:
        if x.ndim != nd or any(
            x.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax
        ):
            raise DimensionError(
                f"concat operands disagree off axis {ax}: {[t.shape for t in xs]}"
            )
    y = np.concatenate([x.data for x in xs], axis=ax)
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs))
        )

    return _result("concat", y, tuple(xs), bw)


def stack(xs, axis=0):
    xs = [as_tensor(x) for x in xs]
    ax = axis if axis >= 0 else axis + xs[0].ndim + 1
    return concat([reshape(x, x.shape[:ax] + (1,) + x.shape[ax:]) for x in xs], ax)


# --- linear algebra --------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy batching rules; 2-d operands are the plain case."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        y = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result("matmul", y, (a, b), bw)


def einsum(spec: str, *operands):
    """Differentiable einsum for explicit specs without repeated indices per operand."""
    ops = [as_tensor(o) for o in operands]
    ins, out = spec.replace(" ", "").split("->")
    ins = ins.split(",")
    if len(ins) != len(ops):
        raise DimensionError(f"einsum spec {spec!r} expects {len(ins)} operands")
    try:
        y = np.einsum(spec, *[o.data for o in ops], optimize=len(ops) > 2)
    except ValueError as e:
        raise DimensionError(f"einsum {spec!r} on {[o.shape for o in ops]}: {e}") from None

    def bw(g):
        grads = []
        for i, o in enumerate(ops):
            if not o.requires_grad:
                grads.append(None)
                continue
            others = [ins[j] for j in range(len(ops)) if j != i]
            seen = set(out).union(*others)
            kept = "".join(c for c in ins[i] if c in seen)
            sub = ",".join([out] + others) + "->" + kept
            args = [g] + [ops[j].data for j in range(len(ops)) if j != i]
            gi = np.einsum(sub, *args, optimize=len(args) > 2)
            if kept != ins[i]:
                # indices summed away in the forward pass get a broadcast gradient
                shape = [o.shape[k] if c in seen else 1 for k, c in enumerate(ins[i])]
                gi = np.broadcast_to(gi.reshape(shape), o.shape)
            grads.append(gi)
        return tuple(grads)

    return _result("einsum", y, tuple(ops), bw)


def graph_conv(x, w, a):
    """``y[n,o,t,u] = sum_{d,c,v} w[d,o,c] x[n,c,t,v] a[d,v,u]``.

    x: [N, C, T, V], w: [D, O, C], a: [D, V, V] -> [N, O, T, V].
    """
    x, w, a = as_tensor(x), as_tensor(w), as_tensor(a)
    n, c, t, v = x.shape
    d, o, wc = w.shape
    if wc != c or a.shape != (d, v, v):
        raise DimensionError(f"graph_conv shapes disagree: x {x.shape}, w {w.shape}, a {a.shape}")
    a_cat = a.data.transpose(1, 0, 2).reshape(v, d * v)  # [V, D*U]
    xa = (x.data.reshape(n * c * t, v) @ a_cat).reshape(n, c, t, d, v)
    xa = np.ascontiguousarray(xa.transpose(0, 3, 1, 2, 4)).reshape(n, d * c, t * v)
    w_cat = w.data.transpose(1, 0, 2).reshape(o, d * c)
    y = np.matmul(w_cat, xa).reshape(n, o, t, v)

    def bw(g):
        gx = gw = ga = None
        g3 = g.reshape(n, o, t * v)
        if w.requires_grad:
            gw = np.tensordot(g3, xa, axes=([0, 2], [0, 2])).reshape(o, d, c).transpose(1, 0, 2)
        if x.requires_grad or a.requires_grad:
            gxa = np.matmul(w_cat.T, g3).reshape(n, d, c, t, v)
            gxa = np.ascontiguousarray(gxa.transpose(0, 2, 3, 1, 4)).reshape(n * c * t, d * v)
            if x.requires_grad:
                gx = (gxa @ a_cat.T).reshape(n, c, t, v)
            if a.requires_grad:
                ga = (x.data.reshape(n * c * t, v).T @ gxa).reshape(v, d, v).transpose(1, 0, 2)
        return gx, gw, ga

    return _result("graph_conv", y, (x, w, a), bw)


# --- convolution -----------------------------------------------------------

def conv2d(x, w, stride_t=1, pad_t=0):
    """Cross-correlation along T for kernels of shape [C_out, C_in, k_t, 1].

    x: [N, C_in, T, V] -> [N, C_out, T', V] with
    T' = (T + 2*pad_t - k_t) // stride_t + 1.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape}, {w.shape}")
    n, cin, t, v = x.shape
    cout, wcin, kt, kv = w.shape
    if kv != 1:
        raise DimensionError(f"only k_v == 1 kernels are supported, got {w.shape}")
    if wcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    if stride_t < 1 or pad_t < 0:
        raise DimensionError(f"invalid stride {stride_t} / padding {pad_t}")
    tp = t + 2 * pad_t
    if kt > tp:
        raise DimensionError(f"kernel length {kt} exceeds padded input length {tp}")
    t_out = (tp - kt) // stride_t + 1
    wk = np.ascontiguousarray(w.data[..., 0].transpose(2, 0, 1))  # [K, O, C]

    if kt == 1 and pad_t == 0:
        xs = np.ascontiguousarray(x.data[:, :, ::stride_t])
        ts = xs.shape[2]
        w1 = wk[0]
        y = np.matmul(w1, xs.reshape(n, cin, ts * v)).reshape(n, cout, ts, v)

        def bw(g):
            gx = gw = None
            g3 = g.reshape(n, cout, ts * v)
            if x.requires_grad:
                gs = np.matmul(w1.T, g3).reshape(n, cin, ts, v)
                if stride_t == 1:
                    gx = gs
                else:
                    gx = np.zeros_like(x.data)
                    gx[:, :, ::stride_t] = gs
            if w.requires_grad:
                gw = np.tensordot(g3, xs.reshape(n, cin, ts * v), axes=([0, 2], [0, 2]))[:, :, None, None]
            return gx, gw

        return _result("conv2d", y, (x, w), bw)

    # time-major layout [T, N, V, C] makes every tap a contiguous block for stride 1
    xt = np.ascontiguousarray(x.data.transpose(2, 0, 3, 1))
    if pad_t:
        xt = np.pad(xt, ((pad_t, pad_t), (0, 0), (0, 0), (0, 0)))
    stop = (t_out - 1) * stride_t + 1
    rows = t_out * n * v

    def tap(k):
        return xt[k : k + stop : stride_t].reshape(rows, cin)

    yt = np.zeros((rows, cout))
    for k in range(kt):
        yt += tap(k) @ wk[k].T
    y = np.ascontiguousarray(yt.reshape(t_out, n, v, cout).transpose(1, 3, 0, 2))

    def bw(g):
        gx = gw = None
        gt = np.ascontiguousarray(g.transpose(2, 0, 3, 1)).reshape(rows, cout)
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for k in range(kt):
                gw[:, :, k, 0] = gt.T @ tap(k)
        if x.requires_grad:
            gxt = np.zeros_like(xt)
            for k in range(kt):
                gxt[k : k + stop : stride_t] += (gt @ wk[k]).reshape(t_out, n, v, cin)
            gx = gxt[pad_t : pad_t + t].transpose(1, 3, 0, 2)
        return gx, gw

    return _result("conv2d", y, (x, w), bw)


# --- normalization / activations -------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class RunningStats:
    """Per-channel running mean / variance; ``None`` until first initialized."""

    def __init__(self, channels):
        self.channels = channels
        self.mean = None
        self.var = None

    @property
    def initialized(self):
        return self.mean is not None

    def reset(self):
        self.mean = np.zeros(self.channels)
        self.var = np.ones(self.channels)


def _channel_sum(a):
    n, c = a.shape[:2]
    return a.reshape(n, c, -1).sum(axis=2).sum(axis=0)


def batchnorm(x, gamma, beta, training, stats: RunningStats, eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel normalization over every axis except axis 1."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm affine shapes {gamma.shape}/{beta.shape} vs {c} channels")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    count = x.data.size // c
    if training:
        if count < 2:
            raise DimensionError(f"batchnorm needs at least 2 values per channel in training, got {count}")
        mu = _channel_sum(x.data) / count
        xc = x.data - mu.reshape(bshape)
        var = _channel_sum(xc * xc) / count
        if not stats.initialized:
            stats.reset()
        stats.mean = (1 - momentum) * stats.mean + momentum * mu
        stats.var = (1 - momentum) * stats.var + momentum * var * count / (count - 1)
    else:
        if not stats.initialized:
            raise StateError("batchnorm in eval mode before running statistics exist")
        mu, var = stats.mean, stats.var
        xc = x.data - mu.reshape(bshape)
    inv = 1.0 / np.sqrt(var + eps)
    scale = (gamma.data * inv).reshape(bshape)
    y = xc * scale + beta.data.reshape(bshape)

    def bw(g):
        xhat = xc * inv.reshape(bshape)
        gb = _channel_sum(g)
        gg = _channel_sum(g * xhat)
        gx = None
        if x.requires_grad:
            if training:
                gx = scale * (g - (gb / count).reshape(bshape) - xhat * (gg / count).reshape(bshape))
            else:
                gx = g * scale
        return gx, (gg if gamma.requires_grad else None), (gb if beta.requires_grad else None)

    return _result("batchnorm", y, (x, gamma, beta), bw)


def softmax(x, axis=-1):
    x = as_tensor(x)
    ax = _norm_axes(axis, x.ndim)[0]
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _result("softmax", y, (x,), bw)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    ax = _norm_axes(axis, x.ndim)[0]
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=ax, keepdims=True),)

    return _result("log_softmax", y, (x,), bw)
