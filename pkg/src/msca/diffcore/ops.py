"""Differentiable primitives over :class:`Tensor`.

Spatial operators take unbatched ``(C, H, W)`` tensors; batching is done by
the callers. Weights follow the ``(out, in)`` / ``(out, in, 3, 3)`` layout.
"""

from __future__ import annotations

import functools
from typing import Sequence

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor, as_tensor, record

LEAKY_SLOPE = 0.1


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _require_rank(x: Tensor, rank: int, op: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{op}: expected rank-{rank} input, got shape {x.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
                  np.add)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
                  np.subtract)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                  np.multiply)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return record("div", out, (a, b), backward, np.divide)


def neg(x: Tensor) -> Tensor:
    return record("neg", -x.data, (x,), lambda g: (-g,), np.negative)


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    xd = x.data
    return record("abs", np.abs(xd), (x,), lambda g: (g * np.sign(xd),), np.abs)


def _leaky(a: np.ndarray) -> np.ndarray:
    return np.maximum(-LEAKY_SLOPE * a, a)


def leaky_relu(x: Tensor) -> Tensor:
    """``max(-0.1 x, x)``; slope is 1 on ``x >= 0`` and -0.1 below."""
    xd = x.data
    slope = np.where(xd >= 0, 1.0, -LEAKY_SLOPE).astype(xd.dtype)
    return record("leaky_relu", _leaky(xd), (x,), lambda g: (g * slope,), _leaky)


def _relu(a):
    return np.maximum(a, 0)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return record("relu", _relu(xd), (x,), lambda g: (g * (xd > 0),), _relu)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return record("sigmoid", y, (x,), lambda g: (g * y * (1 - y),), _sigmoid)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record("tanh", y, (x,), lambda g: (g * (1 - y * y),), np.tanh)


def _softplus(a):
    return np.logaddexp(0, a)


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return record("softplus", _softplus(xd), (x,), lambda g: (g * _sigmoid(xd),), _softplus)


# ---------------------------------------------------------------- reductions

def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    return record("sum", np.asarray(x.data.sum()), (x,),
                  lambda g: (np.broadcast_to(g, shape),),
                  lambda a: np.asarray(a.sum()))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return record("mean", np.asarray(x.data.mean()), (x,),
                  lambda g: (np.broadcast_to(g / n, shape),),
                  lambda a: np.asarray(a.mean()))


def l1(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference."""
    return mean(abs(sub(a, b)))


def gap(x: Tensor) -> Tensor:
    """Global average pooling: ``(C, H, W) -> (C,)``."""
    _require_rank(x, 3, "gap")
    c, h, w = x.shape
    n = h * w

    def backward(g):
        return (np.broadcast_to((g / n)[:, None, None], (c, h, w)),)

    return record("gap", x.data.mean(axis=(1, 2)), (x,), backward,
                  lambda a: a.mean(axis=(1, 2)))


# ---------------------------------------------------------------- shape

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    shape = tuple(shape)
    return record("reshape", x.data.reshape(shape), (x,),
                  lambda g: (g.reshape(old),), lambda a: a.reshape(shape))


def transpose(x: Tensor) -> Tensor:
    _require_rank(x, 2, "transpose")
    return record("transpose", x.data.T, (x,), lambda g: (g.T,), lambda a: a.T)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat: empty input list")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(
                a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", np.concatenate([t.data for t in xs], axis=axis), xs, backward,
                  lambda *arrs: np.concatenate(arrs, axis=axis))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_rank(a, 2, "matmul")
    _require_rank(b, 2, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), np.matmul)


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise convolution ``out[c] = sum_k w[c, k] x[k] (+ b[c])``."""
    _require_rank(x, 3, "conv1x1")
    _require_rank(w, 2, "conv1x1")
    cin, h, wd = x.shape
    if w.shape[1] != cin:
        raise ShapeError(f"conv1x1: weight {w.shape} expects {w.shape[1]} input channels, "
                         f"got input {x.shape}")
    cout = w.shape[0]
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv1x1: bias shape {b.shape} != ({cout},)")
    xm = x.data.reshape(cin, h * wd)
    wd_ = w.data

    def fwd(xa, wa, ba=None):
        out = wa @ xa.reshape(xa.shape[0], -1)
        if ba is not None:
            out = out + ba[:, None]
        return out.reshape(wa.shape[0], *xa.shape[1:])

    def backward(g):
        gm = g.reshape(cout, h * wd)
        gx = (wd_.T @ gm).reshape(cin, h, wd)
        gw = gm @ xm.T
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=1)

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv1x1", fwd(*(t.data for t in inputs)), inputs, backward, fwd)


def _im2col3(xa: np.ndarray, stride: int) -> tuple[np.ndarray, int, int]:
    cin, h, w = xa.shape
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    xp = np.pad(xa, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((9, cin, ho, wo), dtype=xa.dtype)
    for di in range(3):
        for dj in range(3):
            cols[di * 3 + dj] = xp[:, di:di + stride * (ho - 1) + 1:stride,
                                   dj:dj + stride * (wo - 1) + 1:stride]
    return cols.reshape(9 * cin, ho * wo), ho, wo


def _conv3x3_fwd(xa, wa, ba=None, stride=1):
    cols, ho, wo = _im2col3(xa, stride)
    wm = wa.transpose(0, 2, 3, 1).reshape(wa.shape[0], -1)
    out = wm @ cols
    if ba is not None:
        out = out + ba[:, None]
    return out.reshape(wa.shape[0], ho, wo)


def conv3x3(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding 1 and stride 1 or 2."""
    _require_rank(x, 3, "conv3x3")
    if stride not in (1, 2):
        raise ValueError(f"conv3x3: stride must be 1 or 2, got {stride}")
    if w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv3x3: weight {w.shape} incompatible with input {x.shape}")
    cout, cin = w.shape[:2]
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv3x3: bias shape {b.shape} != ({cout},)")
    _, h, wd = x.shape
    cols, ho, wo = _im2col3(x.data, stride)
    wm = w.data.transpose(0, 2, 3, 1).reshape(cout, 9 * cin)
    out = wm @ cols
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(cout, ho, wo)

    def backward(g):
        gm = g.reshape(cout, ho * wo)
        gw = (gm @ cols.T).reshape(cout, 3, 3, cin).transpose(0, 3, 1, 2)
        gcols = (wm.T @ gm).reshape(9, cin, ho, wo)
        gxp = np.zeros((cin, h + 2, wd + 2), dtype=g.dtype)
        for di in range(3):
            for dj in range(3):
                gxp[:, di:di + stride * (ho - 1) + 1:stride,
                    dj:dj + stride * (wo - 1) + 1:stride] += gcols[di * 3 + dj]
        gx = gxp[:, 1:h + 1, 1:wd + 1]
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=1)

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv3x3", out, inputs, backward,
                  lambda *arrs: _conv3x3_fwd(*arrs, stride=stride))


# ---------------------------------------------------------------- resampling

@functools.lru_cache(maxsize=64)
def _up2_matrix(n: int, dtype_name: str) -> np.ndarray:
    # half-pixel centres (align_corners=False), edge-clamped
    m = np.zeros((2 * n, n), dtype=np.float64)
    for o in range(2 * n):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    m = m.astype(dtype_name)
    m.flags.writeable = False
    return m


def bilinear_up2(x: Tensor) -> Tensor:
    """x2 bilinear upsampling, ``(C, H, W) -> (C, 2H, 2W)``."""
    _require_rank(x, 3, "bilinear_up2")
    _, h, w = x.shape
    uh = _up2_matrix(h, x.dtype.name)
    uw = _up2_matrix(w, x.dtype.name)

    def fwd(a):
        return uh @ a @ uw.T

    return record("bilinear_up2", fwd(x.data), (x,), lambda g: (uh.T @ g @ uw,), fwd)


def _avg_pool2(a):
    c, h, w = a.shape
    return a.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling; extents must be even."""
    _require_rank(x, 3, "avg_pool2")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: extents must be even, got {x.shape}")

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4,)

    return record("avg_pool2", _avg_pool2(x.data), (x,), backward, _avg_pool2)


# ---------------------------------------------------------------- softmax / normalization

def _check_finite(x: Tensor, op: str) -> None:
    if not np.isfinite(x.data).all():
        raise NonFiniteError(f"{op}: non-finite logits")


def _softmax_spatial(a):
    k = a.shape[0]
    flat = a.reshape(k, -1)
    e = np.exp(flat - flat.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)).reshape(a.shape)


def softmax_spatial(x: Tensor) -> Tensor:
    """Softmax over the H*W positions of each channel slice."""
    _require_rank(x, 3, "softmax_spatial")
    _check_finite(x, "softmax_spatial")
    y = _softmax_spatial(x.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=(1, 2), keepdims=True)),)

    return record("softmax_spatial", y, (x,), backward, _softmax_spatial)


def _softmax_channel(a):
    e = np.exp(a - a.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax over channels at every spatial location."""
    _require_rank(x, 3, "softmax_channel")
    _check_finite(x, "softmax_channel")
    y = _softmax_channel(x.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=0, keepdims=True)),)

    return record("softmax_channel", y, (x,), backward, _softmax_channel)


def _instance_norm(a, eps):
    mu = a.mean(axis=(1, 2), keepdims=True)
    var = a.var(axis=(1, 2), keepdims=True)
    return (a - mu) / np.sqrt(var + eps)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel spatial standardization without learned affine terms."""
    _require_rank(x, 3, "instance_norm")
    a = x.data
    mu = a.mean(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(a.var(axis=(1, 2), keepdims=True) + eps)
    xhat = (a - mu) * inv

    def backward(g):
        gm = g.mean(axis=(1, 2), keepdims=True)
        gxm = (g * xhat).mean(axis=(1, 2), keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return record("instance_norm", xhat, (x,), backward, lambda arr: _instance_norm(arr, eps))
