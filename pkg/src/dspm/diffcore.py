"""Minimal reverse-mode autodiff over float32 numpy arrays.

Provides exactly the differentiable primitives the depth pipeline needs:
elementwise arithmetic, activations, reductions, softmax, concatenation,
2-D/3-D convolution, batch normalization, 2x upsampling, bilinear map
sampling, and a fused local feature correlation. Every operation validates
that its output is finite; NaN or Inf raises NonFiniteError immediately.

Arrays are float32 by default. The finite-difference harness at the bottom
runs the same op implementations in float64 so the analytic/numeric
comparison is not dominated by single-precision noise.

Graphs are recorded implicitly: each Array produced by an op keeps
references to its parents and a closure that scatters the incoming
gradient. `backward` walks the graph in reverse topological (creation)
order, which makes gradient accumulation deterministic.
"""

from __future__ import annotations

import contextlib
import zlib
import math

import numpy as np

from .errors import DimensionError, NonFiniteError

_GRAD_ENABLED = True

# Test hook: when true, one backward closure is deliberately wrong so the
# gradcheck suite (and the CLI wrapping it) can prove it catches failures.
_FAULT_INJECTION = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Array:
    """A dense array with optional gradient tracking.

    data is row-major float32 (float64 allowed for verification runs);
    once produced by an op the contents are treated as immutable.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        out = Array(self.data, requires_grad=False, dtype=self.data.dtype)
        return out

    def __repr__(self):
        return f"Array(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


def _check_finite(name, data):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{name} produced non-finite values")


def _as_array(v, like=None):
    if isinstance(v, Array):
        return v
    dtype = like.data.dtype if like is not None else np.float32
    return Array(np.asarray(v, dtype=dtype), requires_grad=False, dtype=dtype)


def _make(op, data, parents, backward):
    """Assemble an op output; drops the graph when grads are off/unneeded."""
    _check_finite(op, data)
    out = Array.__new__(Array)
    out.data = data
    out.grad = None
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(parent, g):
    if not parent.requires_grad:
        return
    if parent.grad is None:
        parent.grad = np.zeros_like(parent.data)
    parent.grad += g


def _unbroadcast(g, shape):
    """Sum a gradient down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _as_array(a, b if isinstance(b, Array) else None), _as_array(b, a if isinstance(a, Array) else None)
    data = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make("add", data, (a, b), bw)


def sub(a, b):
    a, b = _as_array(a, b if isinstance(b, Array) else None), _as_array(b, a if isinstance(a, Array) else None)
    data = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make("sub", data, (a, b), bw)


def mul(a, b):
    a, b = _as_array(a, b if isinstance(b, Array) else None), _as_array(b, a if isinstance(a, Array) else None)
    data = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make("mul", data, (a, b), bw)


def div(a, b):
    a, b = _as_array(a, b if isinstance(b, Array) else None), _as_array(b, a if isinstance(a, Array) else None)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make("div", data, (a, b), bw)


def neg(a):
    data = -a.data

    def bw(g):
        _accum(a, -g)

    return _make("neg", data, (a,), bw)


def exp(a):
    data = np.exp(a.data)

    def bw(g):
        _accum(a, g * data)

    return _make("exp", data, (a,), bw)


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def bw(g):
        _accum(a, g / a.data)

    return _make("log", data, (a,), bw)


def absolute(a):
    """|a|; the subgradient at 0 is 0."""
    data = np.abs(a.data)

    def bw(g):
        _accum(a, g * np.sign(a.data))

    return _make("abs", data, (a,), bw)


def tanh(a):
    data = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - data * data))

    return _make("tanh", data, (a,), bw)


def maximum(a, b):
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = _as_array(a, b if isinstance(b, Array) else None), _as_array(b, a if isinstance(a, Array) else None)
    data = np.maximum(a.data, b.data)

    def bw(g):
        take_a = a.data >= b.data
        _accum(a, _unbroadcast(g * take_a, a.data.shape))
        _accum(b, _unbroadcast(g * ~take_a, b.data.shape))

    return _make("maximum", data, (a, b), bw)


def clip(a, lo=None, hi=None):
    """Hard clamp. Gradient passes only strictly inside the bounds."""
    data = np.clip(a.data, lo, hi)

    def bw(g):
        mask = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            mask &= a.data > lo
        if hi is not None:
            mask &= a.data < hi
        _accum(a, g * mask)

    return _make("clip", data, (a,), bw)


def leaky_relu(a, slope=0.1):
    data = np.where(a.data >= 0, a.data, a.data * a.data.dtype.type(slope))

    def bw(g):
        s = slope if not _FAULT_INJECTION else 2.0 * slope
        _accum(a, g * np.where(a.data >= 0, 1.0, s).astype(a.data.dtype))

    return _make("leaky_relu", data, (a,), bw)


def softplus(a):
    # log(1 + e^x), computed without overflow for large |x|
    x = a.data
    data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        _accum(a, g / (1.0 + np.exp(-x)))

    return _make("softplus", data, (a,), bw)


def sigmoid(a):
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)

    def bw(g):
        _accum(a, g * data * (1.0 - data))

    return _make("sigmoid", data, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and softmax


def reduce_sum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=a.data.dtype)
    data = np.asarray(data, dtype=a.data.dtype)

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make("sum", data, (a,), bw)


def reduce_mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    s = reduce_sum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / n)


def reduce_max(a, axis, keepdims=False):
    """Max along one axis; gradient goes to the first maximal entry."""
    data = a.data.max(axis=axis, keepdims=keepdims)
    idx = a.data.argmax(axis=axis)

    def bw(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        out = np.zeros_like(a.data)
        np.put_along_axis(out, np.expand_dims(idx, axis), gg, axis=axis)
        _accum(a, out)

    return _make("max", np.asarray(data, dtype=a.data.dtype), (a,), bw)


def softmax(a, axis):
    """Numerically stable softmax along `axis`."""
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - dot))

    return _make("softmax", data, (a,), bw)


def logsumexp(a, axis, keepdims=False):
    m = reduce_max(a, axis=axis, keepdims=True)
    s = reduce_sum(exp(sub(a, m)), axis=axis, keepdims=True)
    out = add(log(s), m)
    if not keepdims:
        out = reshape(out, tuple(d for i, d in enumerate(out.data.shape) if i != (axis % out.data.ndim)))
    return out


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a, shape):
    data = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _make("reshape", data, (a,), bw)


def transpose(a, axes):
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def bw(g):
        _accum(a, g.transpose(inv))

    return _make("transpose", data, (a,), bw)


def concat(arrays, axis=0):
    arrays = list(arrays)
    data = np.concatenate([x.data for x in arrays], axis=axis)
    sizes = [x.data.shape[axis] for x in arrays]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for x, lo, hi in zip(arrays, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(x, g[tuple(sl)])

    return _make("concat", data, tuple(arrays), bw)


def slice_axis(a, axis, start, stop):
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    data = a.data[sl].copy()

    def bw(g):
        out = np.zeros_like(a.data)
        out[sl] = g
        _accum(a, out)

    return _make("slice", data, (a,), bw)


def stack(arrays, axis=0):
    return concat([reshape(x, x.data.shape[:axis] + (1,) + x.data.shape[axis:]) for x in arrays], axis=axis)


# ---------------------------------------------------------------------------
# convolution


def _pair(v):
    return v if isinstance(v, tuple) else (v, v)


def _im2col2d(xp, kh, kw, stride):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x, w, stride=1, padding=None):
    """Cross-correlation of [B,C,H,W] (or [C,H,W]) with [Co,C,kh,kw].

    Zero padding; `padding=None` selects the shape-preserving (k-1)/2 for
    stride 1. Odd kernels only.
    """
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input/kernel, got {x.data.shape} and {w.data.shape}")
    co, ci, kh, kw = w.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError("conv2d kernels must have odd extents")
    if xd.shape[1] != ci:
        raise DimensionError(f"conv2d channel mismatch: input {xd.shape[1]} vs kernel {ci}")
    if padding is None:
        padding = (kh - 1) // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, ho, wo = _im2col2d(xp, kh, kw, stride)
    out = cols @ w.data.reshape(co, -1).T
    b = xd.shape[0]
    out = out.reshape(b, ho, wo, co).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]

    def bw(g):
        gd = g[None] if squeeze else g
        gflat = gd.transpose(0, 2, 3, 1).reshape(-1, co)
        if w.requires_grad:
            cols_b, _, _ = _im2col2d(xp, kh, kw, stride)
            _accum(w, (gflat.T @ cols_b).reshape(w.data.shape))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    wk = w.data[:, :, i, j]
                    contrib = np.tensordot(gd, wk, axes=([1], [0]))  # [B,Ho,Wo,C]
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + xd.shape[2], padding:padding + xd.shape[3]]
            _accum(x, dx[0] if squeeze else dx)

    return _make("conv2d", np.ascontiguousarray(out), (x, w), bw)


def _im2col3d(xp, kd, kh, kw, ):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    b, c, do, ho, wo = win.shape[:5]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(b * do * ho * wo, c * kd * kh * kw)
    return np.ascontiguousarray(cols), do, ho, wo


def conv3d(x, w, padding=None):
    """Stride-1 cross-correlation of [B,C,D,H,W] (or [C,D,H,W]) with
    [Co,C,kd,kh,kw]; zero padded to preserve shape by default."""
    squeeze = x.data.ndim == 4
    xd = x.data[None] if squeeze else x.data
    co, ci, kd, kh, kw = w.data.shape
    if xd.shape[1] != ci:
        raise DimensionError(f"conv3d channel mismatch: input {xd.shape[1]} vs kernel {ci}")
    if padding is None:
        padding = ((kd - 1) // 2, (kh - 1) // 2, (kw - 1) // 2)
    pd, ph, pw = padding
    xp = np.pad(xd, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    cols, do, ho, wo = _im2col3d(xp, kd, kh, kw)
    out = cols @ w.data.reshape(co, -1).T
    b = xd.shape[0]
    out = out.reshape(b, do, ho, wo, co).transpose(0, 4, 1, 2, 3)
    if squeeze:
        out = out[0]

    def bw(g):
        gd = g[None] if squeeze else g
        gflat = gd.transpose(0, 2, 3, 4, 1).reshape(-1, co)
        if w.requires_grad:
            cols_b, _, _, _ = _im2col3d(xp, kd, kh, kw)
            _accum(w, (gflat.T @ cols_b).reshape(w.data.shape))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        wk = w.data[:, :, i, j, k]
                        contrib = np.tensordot(gd, wk, axes=([1], [0]))
                        dxp[:, :, i:i + do, j:j + ho, k:k + wo] += contrib.transpose(0, 4, 1, 2, 3)
            dx = dxp[:, :, pd:pd + xd.shape[2], ph:ph + xd.shape[3], pw:pw + xd.shape[4]]
            _accum(x, dx[0] if squeeze else dx)

    return _make("conv3d", np.ascontiguousarray(out), (x, w), bw)


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.9, eps=1e-5):
    """Per-channel batch norm.

    Channel axis is 1 for 4-D input, 0 for 3-D. In training mode
    statistics come from the batch and the running buffers (plain numpy
    arrays, mutated in place) track them with the given momentum; in
    inference mode the running buffers are used directly.
    """
    nd = x.data.ndim
    if nd == 4:
        caxis, raxes = 1, (0, 2, 3)
    elif nd == 3:
        caxis, raxes = 0, (1, 2)
    else:
        raise DimensionError(f"batch_norm expects 3-D or 4-D input, got {x.data.shape}")
    bshape = [1] * nd
    bshape[caxis] = x.data.shape[caxis]
    gam = gamma.data.reshape(bshape)
    bet = beta.data.reshape(bshape)

    if training:
        m = x.data.mean(axis=raxes, keepdims=True)
        v = x.data.var(axis=raxes, keepdims=True)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * m.reshape(-1).astype(running_mean.dtype)
        running_var *= momentum
        running_var += (1.0 - momentum) * v.reshape(-1).astype(running_var.dtype)
    else:
        m = running_mean.astype(x.data.dtype).reshape(bshape)
        v = running_var.astype(x.data.dtype).reshape(bshape)

    inv = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - m) * inv
    data = gam * xhat + bet

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=raxes).reshape(gamma.data.shape))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=raxes).reshape(beta.data.shape))
        if x.requires_grad:
            if training:
                gh = g * gam
                mg = gh.mean(axis=raxes, keepdims=True)
                mgx = (gh * xhat).mean(axis=raxes, keepdims=True)
                _accum(x, inv * (gh - mg - xhat * mgx))
            else:
                _accum(x, g * gam * inv)

    return _make("batch_norm", data.astype(x.data.dtype), (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# upsampling


def upsample2x_nearest(x):
    """Nearest-neighbor 2x upsampling of the last two axes."""
    data = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def bw(g):
        sh = g.shape[:-2] + (g.shape[-2] // 2, 2, g.shape[-1] // 2, 2)
        _accum(x, g.reshape(sh).sum(axis=(-3, -1)))

    return _make("up2_nearest", data, (x,), bw)


def _up1d(v):
    # last-axis 2x bilinear with half-pixel centers: out[2i] mixes (i-1, i)
    # with weights (1/4, 3/4), out[2i+1] mixes (i, i+1); edges clamp.
    prev = np.concatenate([v[..., :1], v[..., :-1]], axis=-1)
    nxt = np.concatenate([v[..., 1:], v[..., -1:]], axis=-1)
    even = 0.25 * prev + 0.75 * v
    odd = 0.75 * v + 0.25 * nxt
    out = np.stack([even, odd], axis=-1).reshape(v.shape[:-1] + (2 * v.shape[-1],))
    return np.ascontiguousarray(out)


def _up1d_adjoint(g):
    ge = g[..., 0::2]
    go = g[..., 1::2]
    dv = 0.75 * ge + 0.75 * go
    dv[..., :-1] += 0.25 * ge[..., 1:]
    dv[..., 0] += 0.25 * ge[..., 0]
    dv[..., 1:] += 0.25 * go[..., :-1]
    dv[..., -1] += 0.25 * go[..., -1]
    return dv


def upsample2x_bilinear(x):
    """Bilinear 2x upsampling of the last two axes (half-pixel centers)."""
    data = _up1d(np.swapaxes(_up1d(x.data), -1, -2))
    data = np.ascontiguousarray(np.swapaxes(data, -1, -2))

    def bw(g):
        gy = np.swapaxes(_up1d_adjoint(np.swapaxes(g, -1, -2)), -1, -2)
        _accum(x, _up1d_adjoint(gy).astype(x.data.dtype))

    return _make("up2_bilinear", data.astype(x.data.dtype), (x,), bw)


# ---------------------------------------------------------------------------
# sampling and correlation


def bilinear_sample(m, coords):
    """Sample [C,H,W] at continuous pixel positions.

    coords is [2,H',W'] with coords[0]=x (column) and coords[1]=y (row);
    positions are clamped to the map border, and the gradient flows both to
    the map values and to the coordinates (zero where clamping is active).
    """
    if m.data.ndim != 3 or coords.data.ndim != 3 or coords.data.shape[0] != 2:
        raise DimensionError(f"bilinear_sample expects [C,H,W] map and [2,H',W'] coords, got {m.data.shape} and {coords.data.shape}")
    c, h, w = m.data.shape
    xs = np.clip(coords.data[0], 0.0, w - 1.0)
    ys = np.clip(coords.data[1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(xs), 0, w - 2).astype(np.int64) if w > 1 else np.zeros_like(xs, dtype=np.int64)
    y0 = np.clip(np.floor(ys), 0, h - 2).astype(np.int64) if h > 1 else np.zeros_like(ys, dtype=np.int64)
    fx = (xs - x0).astype(m.data.dtype)
    fy = (ys - y0).astype(m.data.dtype)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)

    flat = m.data.reshape(c, h * w)
    i00 = (y0 * w + x0).ravel()
    i01 = (y0 * w + x1).ravel()
    i10 = (y1 * w + x0).ravel()
    i11 = (y1 * w + x1).ravel()
    v00 = flat[:, i00].reshape(c, *xs.shape)
    v01 = flat[:, i01].reshape(c, *xs.shape)
    v10 = flat[:, i10].reshape(c, *xs.shape)
    v11 = flat[:, i11].reshape(c, *xs.shape)
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    data = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def bw(g):
        if m.requires_grad:
            dm = np.zeros((c, h * w), dtype=m.data.dtype)
            for idx, wt in ((i00, w00), (i01, w01), (i10, w10), (i11, w11)):
                contrib = (g * wt).reshape(c, -1)
                for ch in range(c):
                    dm[ch] += np.bincount(idx, weights=contrib[ch], minlength=h * w).astype(m.data.dtype)
            _accum(m, dm.reshape(m.data.shape))
        if coords.requires_grad:
            dvx = (v01 - v00) * (1 - fy) + (v11 - v10) * fy
            dvy = (v10 - v00) * (1 - fx) + (v11 - v01) * fx
            gx = (g * dvx).sum(axis=0)
            gy = (g * dvy).sum(axis=0)
            # clamped coordinates receive no gradient
            gx *= (coords.data[0] > 0.0) & (coords.data[0] < w - 1.0)
            gy *= (coords.data[1] > 0.0) & (coords.data[1] < h - 1.0)
            _accum(coords, np.stack([gx, gy]).astype(coords.data.dtype))

    return _make("bilinear_sample", data.astype(m.data.dtype), (m, coords), bw)


def _edge_unpad_grad(gp, r):
    # adjoint of edge ("replicate") padding of the last two axes
    g = gp[..., r:-r, :].copy()
    g[..., 0, :] += gp[..., :r, :].sum(axis=-2)
    g[..., -1, :] += gp[..., -r:, :].sum(axis=-2)
    g2 = g[..., :, r:-r].copy()
    g2[..., :, 0] += g[..., :, :r].sum(axis=-1)
    g2[..., :, -1] += g[..., :, -r:].sum(axis=-1)
    return g2


def local_correlation(f, radius):
    """All-pairs local feature dot products.

    Output [(2r+1)^2, H, W]; channel k = (dy+r)*(2r+1)+(dx+r) holds
    <f[p], f[p+(dx,dy)]> / sqrt(C) with border-clamped neighbor access.
    Accumulation runs in float64 so float32 inputs keep full precision.
    """
    if f.data.ndim != 3:
        raise DimensionError(f"local_correlation expects [C,H,W], got {f.data.shape}")
    c, h, w = f.data.shape
    r = int(radius)
    scale = 1.0 / math.sqrt(c)
    fp = np.pad(f.data, ((0, 0), (r, r), (r, r)), mode="edge")
    f64 = f.data.astype(np.float64)
    fp64 = fp.astype(np.float64)
    side = 2 * r + 1
    out = np.empty((side * side, h, w), dtype=np.float64)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            shifted = fp64[:, r + dy:r + dy + h, r + dx:r + dx + w]
            out[(dy + r) * side + (dx + r)] = (f64 * shifted).sum(axis=0) * scale

    def bw(g):
        df = np.zeros_like(f.data, dtype=np.float64)
        dfp = np.zeros_like(fp64)
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                gk = g[(dy + r) * side + (dx + r)] * scale
                shifted = fp64[:, r + dy:r + dy + h, r + dx:r + dx + w]
                df += gk * shifted
                dfp[:, r + dy:r + dy + h, r + dx:r + dx + w] += gk * f64
        df += _edge_unpad_grad(dfp, r)
        _accum(f, df.astype(f.data.dtype))

    return _make("local_correlation", out.astype(f.data.dtype), (f,), bw)


def select_argmax(values, scores):
    """Pick values[argmax_j scores[j]] per pixel.

    values and scores are [m,H,W]; the index choice is treated as a
    constant, so the gradient reaches only the selected value entries.
    """
    if values.data.shape != scores.data.shape:
        raise DimensionError("select_argmax: values and scores must share a shape")
    idx = scores.data.argmax(axis=0)
    data = np.take_along_axis(values.data, idx[None], axis=0)[0]

    def bw(g):
        out = np.zeros_like(values.data)
        np.put_along_axis(out, idx[None], g[None], axis=0)
        _accum(values, out)

    return _make("select_argmax", data.copy(), (values, scores), bw)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss):
    """Reverse-mode accumulation from a scalar loss.

    Walks the recorded graph in reverse topological order; accumulation
    order is fixed by graph construction order, so repeated runs on the
    same graph produce bit-identical gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require gradients; nothing to backpropagate")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None  # free; leaves keep theirs


# ---------------------------------------------------------------------------
# finite-difference verification


def finite_difference_check(fn, inputs, wrt=None, eps=1e-3, max_entries=None, rng=None):
    """Compare analytic gradients of scalar fn(*inputs) with central
    finite differences.

    Perturbs every entry of each checked input (or a random subset of
    max_entries for large tensors) and returns the worst relative error
    max|g_an - g_fd| / max(|g_an|, |g_fd|, 1e-4).
    """
    for a in inputs:
        a.grad = None
    loss = fn(*inputs)
    backward(loss)
    targets = wrt if wrt is not None else [a for a in inputs if a.requires_grad]
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for a in targets:
        if a.grad is None:
            raise ValueError("checked input received no gradient")
        an = a.grad.reshape(-1)
        flat = a.data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            idxs = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            idxs = np.arange(flat.size)
        for i in idxs:
            old = flat[i]
            with no_grad():
                flat[i] = old + eps
                f1 = fn(*inputs).item()
                flat[i] = old - eps
                f0 = fn(*inputs).item()
            flat[i] = old
            fd = (f1 - f0) / (2.0 * eps)
            err = abs(an[i] - fd) / max(abs(an[i]), abs(fd), 1e-4)
            worst = max(worst, err)
    return worst


def _rand(rng, shape, dtype=np.float64, requires_grad=True, scale=1.0):
    return Array(rng.standard_normal(shape) * scale, requires_grad=requires_grad, dtype=dtype)


def _nudge_from(values, kinks, margin=0.05):
    """Move entries away from piecewise-linear kinks so central differences
    measure the gradient rather than the kink."""
    out = values.copy()
    for k in kinks:
        near = np.abs(out - k) < margin
        out[near] = k + np.where(out[near] >= k, margin, -margin) * 1.5
    return out


def gradcheck_suite(seed=0, instances=5, tol=1e-3):
    """Finite-difference check of every differentiable primitive.

    Returns a list of (name, worst_relative_error, passed) rows; each
    primitive is exercised on `instances` random instances.
    """
    results = []

    def run(name, builder):
        worst = 0.0
        salt = zlib.crc32(name.encode("ascii")) % 997
        for k in range(instances):
            rng = np.random.default_rng(seed * 1000 + salt + k)
            fn, inputs = builder(rng)
            worst = max(worst, finite_difference_check(fn, inputs, max_entries=48, rng=rng))
        results.append((name, worst, worst < tol))

    def head(rng, shape):
        w = Array(rng.standard_normal(shape), dtype=np.float64)
        return lambda y: reduce_sum(mul(y, w))

    run("add", lambda rng: ((lambda a, b: reduce_sum(mul(add(a, b), add(a, b)))), [_rand(rng, (3, 4)), _rand(rng, (3, 4))]))
    run("sub_mul_div", lambda rng: ((lambda a, b: reduce_sum(div(mul(a, sub(a, b)), add(exp(b), 2.0)))), [_rand(rng, (2, 5)), _rand(rng, (2, 5))]))
    run("broadcast", lambda rng: ((lambda a, b: reduce_sum(mul(a, b))), [_rand(rng, (3, 1, 4)), _rand(rng, (1, 2, 4))]))
    def abs_case(rng):
        a = Array(_nudge_from(rng.standard_normal((4, 4)), [0.0]), requires_grad=True, dtype=np.float64)
        return (lambda x: reduce_sum(log(add(absolute(x), 0.5)))), [a]

    run("exp_log_abs", abs_case)
    run("tanh", lambda rng: ((lambda a: reduce_sum(tanh(a))), [_rand(rng, (3, 5))]))

    def maximum_case(rng):
        av = rng.standard_normal((4, 3))
        bv = rng.standard_normal((4, 3))
        bv = av + _nudge_from(bv - av, [0.0])  # keep the two operands apart
        a = Array(av, requires_grad=True, dtype=np.float64)
        b = Array(bv, requires_grad=True, dtype=np.float64)
        return (lambda x, y: reduce_sum(maximum(x, y))), [a, b]

    run("maximum", maximum_case)

    def clip_case(rng):
        a = Array(_nudge_from(rng.standard_normal((5, 5)), [-0.8, 0.8]),
                  requires_grad=True, dtype=np.float64)
        return (lambda x: reduce_sum(clip(x, -0.8, 0.8))), [a]

    run("clip", clip_case)

    def lrelu_case(rng):
        a = Array(_nudge_from(rng.standard_normal((4, 6)), [0.0]), requires_grad=True, dtype=np.float64)
        return (lambda x: reduce_sum(mul(leaky_relu(x), leaky_relu(x)))), [a]

    run("leaky_relu", lrelu_case)
    run("softplus", lambda rng: ((lambda a: reduce_sum(softplus(a))), [_rand(rng, (3, 7))]))
    run("sigmoid", lambda rng: ((lambda a: reduce_sum(mul(sigmoid(a), sigmoid(a)))), [_rand(rng, (3, 7))]))
    run("reduce_sum_axis", lambda rng: ((lambda a: reduce_sum(mul(reduce_sum(a, axis=1), reduce_sum(a, axis=1)))), [_rand(rng, (3, 4, 2))]))
    run("reduce_mean", lambda rng: ((lambda a: reduce_sum(mul(reduce_mean(a, axis=0), reduce_mean(a, axis=0)))), [_rand(rng, (4, 5))]))
    def reduce_max_case(rng):
        v = rng.standard_normal((5, 6))
        v += np.arange(5)[:, None] * 0.013  # break near-ties along the axis
        return (lambda a: reduce_sum(reduce_max(a, axis=0))), [Array(v, requires_grad=True, dtype=np.float64)]

    run("reduce_max", reduce_max_case)

    def softmax_case(rng):
        h = head(rng, (4, 5))
        return (lambda a: h(softmax(a, axis=0))), [_rand(rng, (4, 5))]

    run("softmax", softmax_case)
    run("logsumexp", lambda rng: ((lambda a: reduce_sum(logsumexp(a, axis=0))), [_rand(rng, (3, 6))]))
    run("concat_slice", lambda rng: ((lambda a, b: reduce_sum(mul(slice_axis(concat([a, b], axis=0), 0, 0, 3), 1.5))), [_rand(rng, (2, 4)), _rand(rng, (3, 4))]))
    run("reshape_transpose", lambda rng: ((lambda a: reduce_sum(mul(transpose(reshape(a, (4, 6)), (1, 0)), 0.7))), [_rand(rng, (2, 2, 6))]))

    def conv2d_case(rng):
        x = _rand(rng, (2, 3, 5, 5))
        w = _rand(rng, (4, 3, 3, 3), scale=0.5)
        hw = Array(rng.standard_normal((2, 4, 5, 5)), dtype=np.float64)
        return (lambda xx, ww: reduce_sum(mul(conv2d(xx, ww), hw))), [x, w]

    def conv2d_strided_case(rng):
        x = _rand(rng, (1, 2, 7, 7))
        w = _rand(rng, (3, 2, 3, 3), scale=0.5)
        hw = Array(rng.standard_normal((1, 3, 4, 4)), dtype=np.float64)
        return (lambda xx, ww: reduce_sum(mul(conv2d(xx, ww, stride=2, padding=1), hw))), [x, w]

    run("conv2d", conv2d_case)
    run("conv2d_stride2", conv2d_strided_case)

    def conv3d_case(rng):
        x = _rand(rng, (2, 3, 4, 4))
        w = _rand(rng, (2, 2, 3, 3, 3), scale=0.5)
        hw = Array(rng.standard_normal((2, 3, 4, 4)), dtype=np.float64)
        return (lambda xx, ww: reduce_sum(mul(conv3d(xx, ww), hw))), [x, w]

    run("conv3d", conv3d_case)

    def bn_case(training):
        def builder(rng):
            x = _rand(rng, (2, 3, 4, 5))
            gam = Array(1.0 + 0.1 * rng.standard_normal(3), requires_grad=True, dtype=np.float64)
            bet = Array(0.1 * rng.standard_normal(3), requires_grad=True, dtype=np.float64)
            hw = Array(rng.standard_normal((2, 3, 4, 5)), dtype=np.float64)
            rm = rng.standard_normal(3) * 0.1
            rv = 1.0 + 0.1 * rng.random(3)

            def fn(xx, gg, bb):
                return reduce_sum(mul(batch_norm(xx, gg, bb, rm.copy(), rv.copy(), training=training), hw))

            return fn, [x, gam, bet]

        return builder

    run("batch_norm_train", bn_case(True))
    run("batch_norm_eval", bn_case(False))
    run("upsample_nearest", lambda rng: ((lambda a: reduce_sum(mul(upsample2x_nearest(a), 0.3))), [_rand(rng, (2, 3, 4))]))

    def up_bilinear_case(rng):
        hw = Array(rng.standard_normal((2, 6, 8)), dtype=np.float64)
        return (lambda a: reduce_sum(mul(upsample2x_bilinear(a), hw))), [_rand(rng, (2, 3, 4))]

    run("upsample_bilinear", up_bilinear_case)

    def sample_case(rng):
        m = _rand(rng, (3, 6, 7))
        # keep coords off the integer lattice and away from borders so the
        # finite-difference probe stays inside one bilinear cell
        cx = rng.uniform(1.2, 5.3, size=(4, 5))
        cy = rng.uniform(1.2, 4.3, size=(4, 5))
        cx += np.where(np.abs(cx - np.round(cx)) < 0.05, 0.11, 0.0)
        cy += np.where(np.abs(cy - np.round(cy)) < 0.05, 0.11, 0.0)
        coords = Array(np.stack([cx, cy]), requires_grad=True, dtype=np.float64)
        hw = Array(rng.standard_normal((3, 4, 5)), dtype=np.float64)
        return (lambda mm, cc: reduce_sum(mul(bilinear_sample(mm, cc), hw))), [m, coords]

    run("bilinear_sample", sample_case)

    def corr_case(rng):
        f = _rand(rng, (4, 6, 6))
        hw = Array(rng.standard_normal((25, 6, 6)), dtype=np.float64)
        return (lambda ff: reduce_sum(mul(local_correlation(ff, 2), hw))), [f]

    run("local_correlation", corr_case)

    def select_case(rng):
        v = _rand(rng, (4, 3, 3))
        s = Array(rng.standard_normal((4, 3, 3)), dtype=np.float64)
        return (lambda vv: reduce_sum(mul(select_argmax(vv, s), 1.3))), [v]

    run("select_argmax", select_case)

    def composite_case(rng):
        # conv -> batch norm -> softmax -> sum, the full stack in one graph
        x = _rand(rng, (2, 2, 5, 5), scale=0.8)
        w = _rand(rng, (3, 2, 3, 3), scale=0.5)
        gam = Array(np.ones(3), requires_grad=True, dtype=np.float64)
        bet = Array(np.zeros(3), requires_grad=True, dtype=np.float64)
        hw = Array(rng.standard_normal((2, 3, 5, 5)), dtype=np.float64)
        rm = np.zeros(3)
        rv = np.ones(3)

        def fn(xx, ww, gg, bb):
            y = batch_norm(conv2d(xx, ww), gg, bb, rm.copy(), rv.copy(), training=True)
            return reduce_sum(mul(softmax(y, axis=1), hw))

        return fn, [x, w, gam, bet]

    run("composite_graph", composite_case)
    return results
