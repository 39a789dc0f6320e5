"""Neural primitives on top of :mod:`unext.tensor`.

Layouts are NCHW for feature maps and (batch, tokens, embed) for token maps.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import ContractError, ShapeError, Tensor, _node, add, matmul, reshape

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass
class Conv2dParams:
    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 1


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    momentum: float = 0.1
    eps: float = 1e-5


# ---------------------------------------------------------------- convolution


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # (n, c, oh, ow, kh, kw) -> (n*oh*ow, c*kh*kw)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def _col2im(cols: np.ndarray, xp_shape, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp_shape[:2]
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(xp_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return out


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Zero-padded cross-correlation lowered to a single GEMM."""
    w = p.weight
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    if c != ic:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {ic}")
    s, pad = p.stride, p.padding
    oh, ow = _out_extent(h, kh, s, pad), _out_extent(wd, kw, s, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, s, oh, ow)
    wm = w.data.reshape(oc, -1)
    out = cols @ wm.T
    if p.bias is not None:
        out += p.bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2))
    parents = (x, w) if p.bias is None else (x, w, p.bias)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, oc)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = _col2im(gm @ wm, xp.shape, kh, kw, s, oh, ow)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        if p.bias is None:
            return gx, gw
        return gx, gw, gm.sum(0)

    return _node(out, parents, "conv2d", bw)


def depthwise_conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Per-channel 3x3 convolution, stride 1, pad 1."""
    w = p.weight
    n, c, h, wd = x.shape
    if w.ndim != 4 or w.shape[0] != c or w.shape[1] != 1:
        raise ShapeError(f"depthwise weight must be [{c}, 1, k, k], got {w.shape}")
    kh, kw = w.shape[2:]
    pad = p.padding
    if p.stride != 1 or kh != 2 * pad + 1 or kw != 2 * pad + 1:
        raise ShapeError("depthwise conv must preserve resolution (stride 1, pad (k-1)/2)")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    wk = w.data[:, 0]
    out = np.zeros_like(x.data)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + h, j:j + wd] * wk[:, i, j][None, :, None, None]
    if p.bias is not None:
        out += p.bias.data[None, :, None, None]
    parents = (x, w) if p.bias is None else (x, w, p.bias)

    def bw(g):
        gw = np.zeros_like(w.data)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, i:i + h, j:j + wd])
                gxp[:, :, i:i + h, j:j + wd] += g * wk[:, i, j][None, :, None, None]
        gx = gxp[:, :, pad:pad + h, pad:pad + wd]
        if p.bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _node(out, parents, "dwconv2d", bw)


# ---------------------------------------------------------------- resampling


def maxpool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        onehot = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _node(np.ascontiguousarray(out), (x,), "maxpool2", bw)


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row o holds the half-pixel bilinear weights of output sample o over the input axis."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize with half-pixel centres and border clamping."""
    h, w = x.shape[-2:]
    ah = bilinear_matrix(h, out_h, x.data.dtype)
    aw = bilinear_matrix(w, out_w, x.data.dtype)
    out = ah @ x.data @ aw.T
    return _node(out, (x,), "bilinear", lambda g: (ah.T @ g @ aw,))


def bilinear_up2(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    return bilinear_resize(x, 2 * h, 2 * w)


# ---------------------------------------------------------------- normalization


def batchnorm2d(x: Tensor, p: NormParams, mode: str = "train") -> Tensor:
    n, c, h, w = x.shape
    gamma = p.gamma.data[None, :, None, None]
    beta = p.beta.data[None, :, None, None]
    if mode == "eval":
        mean = p.running_mean.astype(x.data.dtype)[None, :, None, None]
        inv = 1.0 / np.sqrt(p.running_var.astype(x.data.dtype)[None, :, None, None] + p.eps)
        xhat = (x.data - mean) * inv
        out = gamma * xhat + beta

        def bw_eval(g):
            return g * gamma * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _node(out, (x, p.gamma, p.beta), "batchnorm_eval", bw_eval)
    if mode != "train":
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    m = n * h * w
    if m < 2:
        raise ContractError("batchnorm2d in train mode needs at least 2 values per channel")
    mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
    xc = x.data - mean
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * inv
    out = gamma * xhat + beta
    if p.running_mean is not None:
        mom = p.momentum
        p.running_mean *= 1.0 - mom
        p.running_mean += mom * mean.reshape(c)
        p.running_var *= 1.0 - mom
        p.running_var += mom * var.reshape(c)

    def bw(g):
        gxhat = g * gamma
        gx = inv * (gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _node(out, (x, p.gamma, p.beta), "batchnorm", bw)


def layernorm_tokens(t: Tensor, p: NormParams) -> Tensor:
    """Normalize each token over its embedding axis."""
    mean = t.data.mean(axis=-1, keepdims=True)
    xc = t.data - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * inv
    gamma, beta = p.gamma.data, p.beta.data
    lead = tuple(range(t.ndim - 1))

    def bw(g):
        gxhat = g * gamma
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(xhat * gamma + beta, (t, p.gamma, p.beta), "layernorm", bw)


# ---------------------------------------------------------------- activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), "relu", lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
    return _node((xd * cdf).astype(xd.dtype), (x,), "gelu", lambda g: ((g * (cdf + xd * pdf)).astype(g.dtype),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _node(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------- axial shift


def partition_bounds(c: int, partitions: int):
    """Contiguous channel groups; the last group absorbs ``c % partitions``."""
    if partitions < 1:
        raise ContractError("partitions must be positive")
    size = c // partitions
    bounds = []
    for k in range(partitions):
        lo = k * size
        hi = c if k == partitions - 1 else lo + size
        bounds.append((lo, hi))
    return bounds


def _shift_np(x: np.ndarray, axis: int, bounds, offsets) -> np.ndarray:
    out = np.zeros_like(x)
    ext = x.shape[axis]
    for (lo, hi), k in zip(bounds, offsets):
        if hi <= lo:
            continue
        src = [slice(None), slice(lo, hi), slice(None), slice(None)]
        dst = list(src)
        if k >= 0:
            src[axis] = slice(0, ext - k)
            dst[axis] = slice(k, ext)
        else:
            src[axis] = slice(-k, ext)
            dst[axis] = slice(0, ext + k)
        out[tuple(dst)] = x[tuple(src)]
    return out


def shift_channels(x: Tensor, axis: str, partitions: int, offsets: Sequence[int]) -> Tensor:
    """Translate channel groups along one spatial axis with zero fill. Parameter- and FLOP-free."""
    if len(offsets) != partitions:
        raise ContractError(f"{partitions} partitions need {partitions} offsets, got {len(offsets)}")
    ax = {"height": 2, "width": 3}[axis]
    ext = x.shape[ax]
    if any(abs(k) >= ext for k in offsets):
        raise ContractError(f"shift offsets {list(offsets)} too large for {axis} extent {ext}")
    bounds = partition_bounds(x.shape[1], partitions)
    offsets = [int(k) for k in offsets]
    if not any(offsets):
        return x
    back = [-k for k in offsets]
    return _node(_shift_np(x.data, ax, bounds, offsets), (x,), "shift",
                 lambda g: (_shift_np(g, ax, bounds, back),))


# ---------------------------------------------------------------- tokens


def linear_tokens(t: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if t.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear_tokens: token width {t.shape[-1]} vs weight {weight.shape}")
    n, tok, d = t.shape
    out = matmul(reshape(t, (n * tok, d)), weight)
    if bias is not None:
        out = add(out, bias, axis=-1)
    return reshape(out, (n, tok, weight.shape[1]))


def map_to_tokens(x: Tensor) -> Tensor:
    """[n, c, h, w] -> [n, h*w, c], positions row-major."""
    n, c, h, w = x.shape
    data = np.ascontiguousarray(x.data.reshape(n, c, h * w).transpose(0, 2, 1))
    return _node(data, (x,), "to_tokens",
                 lambda g: (np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(n, c, h, w),))


def tokens_to_map(t: Tensor, h: int, w: int) -> Tensor:
    n, tok, c = t.shape
    if tok != h * w:
        raise ShapeError(f"{tok} tokens cannot form a {h}x{w} map")
    data = np.ascontiguousarray(t.data.transpose(0, 2, 1)).reshape(n, c, h, w)
    return _node(data, (t,), "to_map",
                 lambda g: (np.ascontiguousarray(g.reshape(n, c, tok).transpose(0, 2, 1)),))
