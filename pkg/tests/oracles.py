"""Brute-force reference implementations. Plain loops, no shared code with the package."""
import math

import numpy as np


def matmul_loops(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv2d_direct(x, w, b, stride=1, pad=1):
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for bi in range(n):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    s = b[o] if b is not None else 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                r, q = i * stride + u - pad, j * stride + v - pad
                                if 0 <= r < h and 0 <= q < wd:
                                    s += x[bi, ci, r, q] * w[o, ci, u, v]
                    out[bi, o, i, j] = s
    return out


def depthwise_direct(x, w, b):
    n, c, h, wd = x.shape
    out = np.zeros_like(x, dtype=float)
    for ch in range(c):
        out[:, ch:ch + 1] = conv2d_direct(x[:, ch:ch + 1], w[ch:ch + 1], None if b is None else b[ch:ch + 1])
    return out


def maxpool_scan(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for bi in range(n):
        for ch in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    best = -math.inf
                    for u in range(2):
                        for v in range(2):
                            best = max(best, x[bi, ch, 2 * i + u, 2 * j + v])
                    out[bi, ch, i, j] = best
    return out


def bilinear_pixel(img, out_h, out_w):
    """Per output pixel: half-pixel source coordinate, clamp, 4-tap blend."""
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[i, j] = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                         + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    return out


def layernorm_tokens_loop(t, gamma, beta, eps=1e-5):
    out = np.zeros_like(t, dtype=float)
    n, tok, e = t.shape
    for i in range(n):
        for k in range(tok):
            v = [float(t[i, k, d]) for d in range(e)]
            mu = sum(v) / e
            var = sum((a - mu) ** 2 for a in v) / e
            for d in range(e):
                out[i, k, d] = (v[d] - mu) / math.sqrt(var + eps) * gamma[d] + beta[d]
    return out


def batchnorm_two_pass(x, gamma, beta, eps=1e-5):
    n, c, h, w = x.shape
    out = np.zeros_like(x, dtype=float)
    for ch in range(c):
        vals = x[:, ch].ravel().tolist()
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        out[:, ch] = (x[:, ch] - mu) / math.sqrt(var + eps) * gamma[ch] + beta[ch]
    return out


def bce_dice_loop(logits, target, smooth=1.0):
    z = logits.ravel().tolist()
    y = target.ravel().tolist()
    n = len(z)
    bce = 0.0
    inter = ps = ys = 0.0
    for zi, yi in zip(z, y):
        p = 1.0 / (1.0 + math.exp(-zi))
        bce += -(yi * math.log(p) + (1 - yi) * math.log(1 - p))
        inter += p * yi
        ps += p
        ys += yi
    return 0.5 * bce / n + 1.0 - (2 * inter + smooth) / (ps + ys + smooth)


def erf_series(x, terms=60):
    s = 0.0
    for k in range(terms):
        s += (-1) ** k * x ** (2 * k + 1) / (math.factorial(k) * (2 * k + 1))
    return 2.0 / math.sqrt(math.pi) * s


def shift_remap(x, axis, partitions, offsets):
    """out[..., p] = x[..., p - offset] when in range, else 0, group by group."""
    n, c, h, w = x.shape
    size = c // partitions
    out = np.zeros_like(x)
    for ch in range(c):
        g = min(ch // size, partitions - 1) if size else partitions - 1
        k = offsets[g]
        for i in range(h):
            for j in range(w):
                si, sj = (i - k, j) if axis == "height" else (i, j - k)
                if 0 <= si < h and 0 <= sj < w:
                    out[:, ch, i, j] = x[:, ch, si, sj]
    return out


def adam_scalar(w, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return w
