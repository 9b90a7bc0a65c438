"""Minimal dense tensor engine with reverse-mode differentiation.

Every op records a node only while grad mode is on and at least one input
requires a gradient. The graph lives in the closures of the output tensors
and is released by :func:`backward`.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

EPS = 1e-5
BN_MOMENTUM = 0.9

_state = threading.local()


class ShapeError(ValueError):
    pass


def _grad_enabled():
    return getattr(_state, "grad", True)


_DTYPE = [np.float32]


def default_dtype():
    return _DTYPE[0]


def set_default_dtype(dtype):
    """Switch between f32 compute and f64 test mode (process-wide)."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE[0] = dtype


@contextlib.contextmanager
def precision(dtype):
    old = _DTYPE[0]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DTYPE[0] = old


@contextlib.contextmanager
def no_grad():
    old = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _accum(t, g, fresh=False):
    """Add ``g`` into ``t.grad``. ``fresh`` marks ``g`` as a private temporary that may be adopted."""
    if not t.requires_grad:
        return
    if t.grad is None:
        if fresh and g.dtype == t.data.dtype and g.shape == t.data.shape:
            t.grad = g
        else:
            t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _node(data, parents, backward):
    out = Tensor(data, dtype=data.dtype if hasattr(data, "dtype") else None)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _bshape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from e


def backward(loss, grad=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Each node is visited exactly once in reverse topological order; the
    graph is freed afterwards.
    """
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    if grad is None:
        grad = np.ones_like(loss.data)
    loss.grad = np.array(grad, dtype=loss.data.dtype)
    for t in reversed(order):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
    for t in order:
        if t._backward is not None:
            t._parents = ()
            t._backward = None
            t.grad = None if t is not loss else t.grad


# -- pointwise ----------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _bshape(a, b)

    def bw(g):
        ga = _unbroadcast(g, a.shape)
        gb = _unbroadcast(g, b.shape)
        _accum(a, ga, fresh=True)
        _accum(b, gb, fresh=gb is not ga)

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _bshape(a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape), fresh=True)
        _accum(b, _unbroadcast(-g, b.shape), fresh=True)

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _bshape(a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw)


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    return _node(x.data * x.data.dtype.type(c), (x,), lambda g: _accum(x, g * c))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    out = np.maximum(x.data, 0)
    return _node(out, (x,), lambda g: _accum(x, g * mask, fresh=True))


def sigmoid(x):
    x = as_tensor(x)
    # clip keeps exp finite in f32
    out = 1.0 / (1.0 + np.exp(-np.clip(x.data, -80, 80)))
    return _node(out, (x,), lambda g: _accum(x, g * out * (1 - out)))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: _accum(x, g * (1 - out * out)))


def square(x):
    x = as_tensor(x)
    return _node(x.data * x.data, (x,), lambda g: _accum(x, 2 * g * x.data))


def norm(x, axis=-1):
    """Euclidean norm along ``axis`` (keeps no dims). Gradient at 0 is 0."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis))

    def bw(g):
        safe = np.where(n > 0, n, 1)
        _accum(x, np.expand_dims(g / safe * (n > 0), axis) * x.data)

    return _node(n, (x,), bw)


# -- structural ----------------------------------------------------------------

def reshape(x, shape):
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: _accum(x, g.reshape(x.shape)))


def getitem(x, idx):
    x = as_tensor(x)

    basic = not any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        _accum(x, full)

    return _node(x.data[idx], (x,), bw)


def permute_points(x, perm):
    """``out[b, i] = x[b, perm[b, i]]`` for a per-instance permutation ``perm`` (B×N)."""
    x = as_tensor(x)
    perm = np.asarray(perm)
    if perm.shape != x.shape[:2]:
        raise ShapeError(f"permutation shape {perm.shape} does not match {x.shape[:2]}")
    idx = perm.reshape(perm.shape + (1,) * (x.ndim - 2))

    def bw(g):
        full = np.empty_like(g)
        np.put_along_axis(full, np.broadcast_to(idx, g.shape), g, axis=1)
        _accum(x, full, fresh=True)

    return _node(np.take_along_axis(x.data, idx, axis=1), (x,), bw)


def half_diff(x):
    """Second half minus first half along axis 0 (stacked source/target streams)."""
    x = as_tensor(x)
    b, rem = divmod(x.shape[0], 2)
    if rem:
        raise ShapeError(f"half_diff needs an even leading dim, got {x.shape}")

    def bw(g):
        _accum(x, np.concatenate([-g, g], axis=0), fresh=True)

    return _node(x.data[b:] - x.data[:b], (x,), bw)


def transpose(x, axes=None):
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: _accum(x, np.transpose(g, inv)))


def concat(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of nothing")
    sizes = [x.shape[axis] for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from e
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, cuts, axis=axis)):
            _accum(x, part)

    return _node(out, xs, bw)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _node(out, (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    if count == 0:
        raise ShapeError("mean over empty axis")
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a, b):
    """Batched matrix product following ``np.matmul`` broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(a.data @ b.data, (a, b), bw)


# -- per-point layers ------------------------------------------------------------

def linear(x, weight, bias=None):
    """Shared per-point affine map: ``x @ weight + bias`` over the last dim."""
    x, weight = as_tensor(x), as_tensor(weight)
    cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"linear expects last dim {cin}, got {x.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def bw(g):
        if x.requires_grad:
            _accum(x, g @ weight.data.T, fresh=True)
        if weight.requires_grad:
            _accum(weight, x.data.reshape(-1, cin).T @ g.reshape(-1, cout), fresh=True)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.reshape(-1, cout).sum(axis=0), fresh=True)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bw)


def group_linear(x, weight, bias=None):
    """Grouped per-point linear map.

    ``weight`` has shape (G, C/G, C/G); channel block ``k`` of the input is
    mapped by ``weight[k]`` onto channel block ``k`` of the output.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    groups, cg, cg2 = weight.shape
    c = x.shape[-1]
    if cg != cg2 or groups * cg != c:
        raise ShapeError(f"group_linear: {c} channels do not split into {groups} groups of {cg}")
    lead = x.shape[:-1]
    xg = x.data.reshape(-1, groups, cg).transpose(1, 0, 2)  # G×M×cg
    out = (xg @ weight.data).transpose(1, 0, 2).reshape(*lead, c)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data

    def bw(g):
        gg = g.reshape(-1, groups, cg).transpose(1, 0, 2)
        if x.requires_grad:
            gx = gg @ np.swapaxes(weight.data, -1, -2)
            _accum(x, gx.transpose(1, 0, 2).reshape(x.shape), fresh=True)
        if weight.requires_grad:
            _accum(weight, np.swapaxes(xg, -1, -2) @ gg, fresh=True)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.reshape(-1, c).sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bw)


# -- normalization ----------------------------------------------------------------

def context_norm(x, eps=EPS):
    """Per-instance, per-channel standardization across the point axis (-2)."""
    x = as_tensor(x)
    n = x.shape[-2]
    if n < 2:
        raise ShapeError("context_norm needs at least 2 points")
    mu = x.data.mean(axis=-2, keepdims=True)
    d = x.data - mu
    var = (d * d).mean(axis=-2, keepdims=True)
    s = 1.0 / np.sqrt(var + eps)
    out = d * s

    def bw(g):
        # d out / d x for out = (x - mean) / sqrt(var + eps)
        gs = (g * out).mean(axis=-2, keepdims=True)
        res = g - g.mean(axis=-2, keepdims=True)
        res -= out * gs
        res *= s
        _accum(x, res, fresh=True)

    return _node(out, (x,), bw)


def weighted_context_norm(x, w, eps=EPS):
    """Context normalization with per-point weights ``w`` (B×N×1, sums to 1)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.shape != x.shape[:-1] + (1,):
        raise ShapeError(f"weight shape {w.shape} does not match {x.shape}")
    wsum = w.data.sum(axis=-2)
    if np.any(np.abs(wsum - 1) > 1e-3):
        raise ValueError("weighted_context_norm weights must sum to 1 over points")
    if np.any(w.data < 0):
        raise ValueError("weighted_context_norm weights must be nonnegative")
    mu = (w.data * x.data).sum(axis=-2, keepdims=True)
    d = x.data - mu
    var = (w.data * d * d).sum(axis=-2, keepdims=True)
    s = 1.0 / np.sqrt(var + eps)
    out = d * s

    def bw(g):
        dv = -0.5 * s ** 3 * (g * d).sum(axis=-2, keepdims=True)
        q = g * s + 2 * dv * w.data * d
        dmu = -q.sum(axis=-2, keepdims=True)
        if x.requires_grad:
            _accum(x, q + dmu * w.data)
        if w.requires_grad:
            _accum(w, (dv * d * d + dmu * x.data).sum(axis=-1, keepdims=True))

    return _node(out, (x, w), bw)


class BatchNormState:
    """Running mean/variance for one batch-norm layer."""

    def __init__(self, channels, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def copy(self):
        out = BatchNormState(len(self.mean), self.mean.dtype)
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


def batch_norm(x, gamma, beta, state, training, momentum=BN_MOMENTUM, eps=EPS):
    """Normalize each channel over every leading axis.

    In training mode batch statistics are used and ``state`` is updated in
    place; in eval mode the running statistics are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    flat = x.data.reshape(-1, c)
    if training:
        if flat.shape[0] < 2:
            raise ShapeError("batch_norm training needs at least 2 samples per channel")
        mu = flat.mean(axis=0)
        d = x.data - mu
        var = (d * d).reshape(-1, c).mean(axis=0)
        state.mean = momentum * state.mean + (1 - momentum) * mu
        state.var = momentum * state.var + (1 - momentum) * var
    else:
        mu = state.mean.astype(x.data.dtype)
        var = state.var.astype(x.data.dtype)
        d = x.data - mu
    s = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = d * s
    out = xhat * gamma.data + beta.data
    m = flat.shape[0]

    def bw(g):
        g2 = g.reshape(-1, c)
        sg = (g2 * xhat.reshape(-1, c)).sum(axis=0)
        sb = g2.sum(axis=0)
        _accum(gamma, sg, fresh=True)
        _accum(beta, sb, fresh=True)
        if x.requires_grad:
            k = gamma.data * s
            if training:
                res = g - sb / m
                res -= xhat * (sg / m)
                res *= k
                _accum(x, res, fresh=True)
            else:
                _accum(x, g * k, fresh=True)

    return _node(out, (x, gamma, beta), bw)


# -- reductions -------------------------------------------------------------------

def mean_over_points(x):
    return mean(x, axis=-2, keepdims=True)


def weighted_mean_over_points(x, w, eps=EPS):
    """``sum_i w_i x_i / (sum_i w_i + eps)`` over the point axis, keeping it as size 1."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-2] == 0:
        raise ShapeError("empty point axis")
    _bshape(x, w)
    num = (w.data * x.data).sum(axis=-2, keepdims=True)
    den = w.data.sum(axis=-2, keepdims=True) + eps
    out = num / den

    def bw(g):
        if x.requires_grad:
            _accum(x, _unbroadcast(g * w.data / den, x.shape))
        if w.requires_grad:
            _accum(w, _unbroadcast(g * (x.data - out) / den, w.shape))

    return _node(out, (x, w), bw)


def softmax_over_points(x):
    x = as_tensor(x)
    if x.shape[-2] == 0:
        raise ShapeError("empty point axis")
    e = np.exp(x.data - x.data.max(axis=-2, keepdims=True))
    out = e / e.sum(axis=-2, keepdims=True)

    def bw(g):
        _accum(x, out * (g - (g * out).sum(axis=-2, keepdims=True)))

    return _node(out, (x,), bw)


def max_over_layers(xs):
    """Elementwise max across a list of same-shape tensors; ties go to the lowest index."""
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("max over zero layers")
    stack = np.stack([x.data for x in xs])
    arg = stack.argmax(axis=0)
    out = np.take_along_axis(stack, arg[None], axis=0)[0]

    def bw(g):
        for k, x in enumerate(xs):
            if x.requires_grad:
                _accum(x, g * (arg == k))

    return _node(out, xs, bw)


def bce_with_logits(logits, targets, weights=None):
    """Elementwise weighted binary cross-entropy, summed."""
    logits = as_tensor(logits)
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    wt = np.ones_like(z) if weights is None else np.asarray(weights, dtype=z.dtype)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    ez = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1 / (1 + ez), ez / (1 + ez))

    def bw(g):
        _accum(logits, g * wt * (sig - y))

    return _node(np.asarray((wt * per).sum(), dtype=z.dtype), (logits,), bw)


# -- rotations --------------------------------------------------------------------

def _skew(v):
    z = np.zeros(v.shape[:-1], dtype=v.dtype)
    return np.stack([
        np.stack([z, -v[..., 2], v[..., 1]], -1),
        np.stack([v[..., 2], z, -v[..., 0]], -1),
        np.stack([-v[..., 1], v[..., 0], z], -1),
    ], -2)


def _rodrigues_coeffs(theta):
    small = theta < 1e-4
    th = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1 - t2 / 6, np.sin(th) / th)
    b = np.where(small, 0.5 - t2 / 24, (1 - np.cos(th)) / th ** 2)
    # da/dtheta / theta and db/dtheta / theta
    da = np.where(small, -1 / 3 + t2 / 30, (th * np.cos(th) - np.sin(th)) / th ** 3)
    db = np.where(small, -1 / 12 + t2 / 180, (th * np.sin(th) - 2 * (1 - np.cos(th))) / th ** 4)
    return a, b, da, db


def rodrigues(v):
    """Axis-angle vectors (...×3) to rotation matrices (...×3×3)."""
    v = as_tensor(v)
    vd = v.data.astype(np.float64)
    theta = np.sqrt((vd * vd).sum(-1))
    a, b, da, db = _rodrigues_coeffs(theta)
    k = _skew(vd)
    k2 = k @ k
    eye = np.eye(3)
    out = eye + a[..., None, None] * k + b[..., None, None] * k2

    def bw(g):
        g = g.astype(np.float64)
        gv = np.zeros_like(vd)
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            ki = _skew(np.broadcast_to(e, vd.shape))
            dr = (a[..., None, None] * ki + b[..., None, None] * (ki @ k + k @ ki)
                  + (da * vd[..., i])[..., None, None] * k + (db * vd[..., i])[..., None, None] * k2)
            gv[..., i] = (g * dr).sum(axis=(-1, -2))
        _accum(v, gv.astype(v.data.dtype))

    return _node(out.astype(v.data.dtype), (v,), bw)
