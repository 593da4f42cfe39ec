"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Backed by numpy arrays. Every differentiable op records a backward closure
on the output tensor; ``Tensor.backward()`` replays them in reverse
topological order. Broadcasting is restricted to trailing-axis affine cases
(bias adds, per-channel scales) plus python scalars.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Raised on mathematically degenerate inputs (e.g. zero-norm vectors)."""


def set_default_dtype(dtype):
    """Select the real dtype for newly created tensors (float64 or float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph recording within the context (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        """Reverse-mode sweep seeding d(self)/d(self) = 1."""
        if self.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _acc(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _reduce_to_shape(g, shape):
    """Sum gradient g down to a trailing-broadcast operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_trailing_broadcast(a, b, opname):
    if b.ndim > a.ndim:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} incompatible")
    for da, db in zip(a.shape[a.ndim - b.ndim:], b.shape):
        if db != da and db != 1:
            raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} incompatible")


# -- elementwise arithmetic -----------------------------------------------


def add(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        data = a.data + b

        def backward(g):
            _acc(a, g)

        return _make(data, (a,), backward)
    _check_trailing_broadcast(a, b, "add") if b.ndim <= a.ndim else _check_trailing_broadcast(b, a, "add")
    lo, hi = (b, a) if b.ndim <= a.ndim else (a, b)
    data = a.data + b.data

    def backward(g):
        _acc(hi, g)
        _acc(lo, _reduce_to_shape(g, lo.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        data = a.data * b

        def backward(g):
            _acc(a, g * b)

        return _make(data, (a,), backward)
    _check_trailing_broadcast(a, b, "mul") if b.ndim <= a.ndim else _check_trailing_broadcast(b, a, "mul")
    data = a.data * b.data

    def backward(g):
        if b.ndim <= a.ndim:
            _acc(a, g * b.data)
            _acc(b, _reduce_to_shape(g * a.data, b.shape))
        else:
            _acc(b, g * a.data)
            _acc(a, _reduce_to_shape(g * b.data, a.shape))

    return _make(data, (a, b), backward)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and b.size != 1:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} incompatible")
    data = a.data / b.data

    def backward(g):
        _acc(a, _reduce_to_shape(g / b.data, a.shape))
        _acc(b, _reduce_to_shape(-g * a.data / (b.data ** 2), b.shape))

    return _make(data, (a, b), backward)


def exp(a):
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        _acc(a, g * data)

    return _make(data, (a,), backward)


def log(a):
    a = _as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        _acc(a, g / a.data)

    return _make(data, (a,), backward)


def sqrt(a):
    a = _as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        _acc(a, g * 0.5 / data)

    return _make(data, (a,), backward)


def tanh(a):
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        _acc(a, g * (1.0 - data ** 2))

    return _make(data, (a,), backward)


def sigmoid(a):
    a = _as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    data = np.where(a.data >= 0, data, 1.0 - data)

    def backward(g):
        _acc(a, g * data * (1.0 - data))

    return _make(data, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
        _acc(a, g * grad)

    return _make(data, (a,), backward)


# -- shape manipulation ----------------------------------------------------


def reshape(a, *shape):
    a = _as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.shape
    data = a.data.reshape(shape)

    def backward(g):
        _acc(a, g.reshape(old))

    return _make(data, (a,), backward)


def transpose(a, axes=None):
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    data = a.data.transpose(axes)

    def backward(g):
        _acc(a, g.transpose(inv))

    return _make(data, (a,), backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _acc(t, piece)

    return _make(data, tuple(tensors), backward)


def stack(tensors, axis=0):
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


def getitem(a, key):
    a = _as_tensor(a)
    data = a.data[key]
    if data.base is not None or np.isscalar(data):
        data = np.array(data)
    advanced = isinstance(key, np.ndarray) or (
        isinstance(key, tuple) and any(isinstance(k, np.ndarray) for k in key)
    )

    def backward(g):
        buf = np.zeros_like(a.data)
        if advanced:
            np.add.at(buf, key, g)
        else:
            buf[key] += g
        _acc(a, buf)

    return _make(data, (a,), backward)


def expand_leading(a, n):
    """Tile a along a new leading axis; gradients sum over the copies."""
    a = _as_tensor(a)
    data = np.broadcast_to(a.data, (n,) + a.shape).copy()

    def backward(g):
        _acc(a, g.sum(axis=0))

    return _make(data, (a,), backward)


def pad2d(a, top, bottom, left, right):
    """Zero-pad the first two axes of an [H, W, ...] tensor."""
    a = _as_tensor(a)
    widths = ((top, bottom), (left, right)) + ((0, 0),) * (a.ndim - 2)
    data = np.pad(a.data, widths)

    def backward(g):
        sl = (slice(top, g.shape[0] - bottom or None), slice(left, g.shape[1] - right or None))
        _acc(a, g[sl])

    return _make(data, (a,), backward)


def zero_upsample2d(a, stride):
    """Insert stride-1 zeros between entries of the first two axes."""
    a = _as_tensor(a)
    h, w = a.shape[:2]
    out_shape = (h * stride, w * stride) + a.shape[2:]
    data = np.zeros(out_shape, dtype=a.data.dtype)
    data[::stride, ::stride] = a.data

    def backward(g):
        _acc(a, g[::stride, ::stride])

    return _make(data, (a,), backward)


def take_flat(a, idx):
    """Gather from the flattened tensor; backward scatter-adds."""
    a = _as_tensor(a)
    flat = a.data.reshape(-1)
    data = flat[idx]

    def backward(g):
        buf = np.zeros(a.size, dtype=a.data.dtype)
        np.add.at(buf, idx.reshape(-1), g.reshape(-1))
        _acc(a, buf.reshape(a.shape))

    return _make(data, (a,), backward)


# -- reductions -------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")
    data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        _acc(a, _reduce_to_shape(ga, a.shape))
        gb = np.swapaxes(a.data, -1, -2) @ g
        _acc(b, _reduce_to_shape(gb, b.shape))

    return _make(data, (a, b), backward)


# -- fused neural-net primitives ---------------------------------------------


def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        gs = (g * data).sum(axis=axis, keepdims=True)
        _acc(a, data * (g - gs))

    return _make(data, (a,), backward)


def log_softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def backward(g):
        sm = np.exp(data)
        _acc(a, g - sm * g.sum(axis=axis, keepdims=True))

    return _make(data, (a,), backward)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match feature dim {d}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        _acc(beta, g.sum(axis=lead))
        _acc(gamma, (g * xhat).sum(axis=lead))
        gx = g * gamma.data
        _acc(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                       - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(data, (x, gamma, beta), backward)


def smooth_l1(pred, target, beta=1.0):
    """Elementwise smooth-L1 (Huber) against a constant target."""
    pred = _as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    d = pred.data - t
    absd = np.abs(d)
    data = np.where(absd < beta, 0.5 * d ** 2 / beta, absd - 0.5 * beta)

    def backward(g):
        _acc(pred, g * np.clip(d / beta, -1.0, 1.0))

    return _make(data, (pred,), backward)


def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy on logits, numerically stable."""
    logits = _as_tensor(logits)
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.data.dtype)
    z = logits.data
    data = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        p = 1.0 / (1.0 + np.exp(-np.abs(z)))
        p = np.where(z >= 0, p, 1.0 - p)
        _acc(logits, g * (p - t))

    return _make(data, (logits,), backward)


def cosine(a, b):
    """Cosine similarity of two same-length vectors; errors on zero norms."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"cosine: expected equal 1-D shapes, got {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine: zero-norm operand")
    dot = sum_(mul(a, b))
    return div(dot, sqrt(mul(sum_(mul(a, a)), sum_(mul(b, b)))))


def l2_normalize(a, eps=1e-12):
    a = _as_tensor(a)
    return div(a, sqrt(sum_(mul(a, a)) + eps))


# -- parameters and optimizers -----------------------------------------------


def parameter(data, rng=None, scale=None, shape=None):
    """Create a trainable tensor. If data is None, draw normal(0, scale)."""
    if data is None:
        data = rng.normal(0.0, scale, size=shape)
    return Tensor(data, requires_grad=True)


class SGD:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if not p.requires_grad or p.grad is None:
                continue
            p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if not p.requires_grad or p.grad is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * p.grad
            self.v[i] = b2 * self.v[i] + (1 - b2) * p.grad ** 2
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- convolution (im2col + matmul) --------------------------------------------

_COL_INDEX_CACHE = {}


def _im2col_indices(hp, wp, c, kh, kw, stride):
    key = (hp, wp, c, kh, kw, stride)
    idx = _COL_INDEX_CACHE.get(key)
    if idx is None:
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        patch = (np.arange(kh)[:, None, None] * wp * c
                 + np.arange(kw)[None, :, None] * c
                 + np.arange(c)[None, None, :]).reshape(-1)
        base = (np.arange(ho)[:, None] * stride * wp * c
                + np.arange(wo)[None, :] * stride * c).reshape(-1)
        idx = base[:, None] + patch[None, :]
        _COL_INDEX_CACHE[key] = idx
    return idx


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """2-D convolution on an [H, W, Cin] tensor with a [kh, kw, Cin, Cout] kernel."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    kh, kw, cin, cout = kernel.shape
    if x.ndim != 3 or x.shape[2] != cin:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    xp = pad2d(x, padding, padding, padding, padding) if padding else x
    hp, wp, _ = xp.shape
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than padded input {xp.shape}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    idx = _im2col_indices(hp, wp, cin, kh, kw, stride)
    cols = take_flat(xp, idx)
    out = matmul(cols, reshape(kernel, (kh * kw * cin, cout)))
    if bias is not None:
        out = add(out, bias)
    return reshape(out, (ho, wo, cout))


def deconv2d(x, kernel, bias=None, stride=2):
    """Transposed convolution: upsamples spatial extent by `stride`.

    Kernel spatial size must be >= stride; output extent is stride * input extent.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    kh, kw, cin, cout = kernel.shape
    if kh < stride or kw < stride:
        raise ShapeError(f"deconv2d: kernel {kernel.shape} smaller than stride {stride}")
    up = zero_upsample2d(x, stride)
    pt, pl = (kh - 1) // 2, (kw - 1) // 2
    up = pad2d(up, pt, kh - 1 - pt, pl, kw - 1 - pl)
    return conv2d(up, kernel, bias=bias, stride=1, padding=0)
