"""Slow, obviously-correct reference implementations used only by tests."""
from __future__ import annotations

import math

import numpy as np


def naive_conv2d(x, kernel, bias, stride=1, padding="same", dilation=1):
    """Seven nested loops in Python floats; zero padding outside the image."""
    n, h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    if padding == "same":
        ph, pw = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2
    else:
        ph = pw = 0
    ho = (h + 2 * ph - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * pw - dilation * (kw - 1) - 1) // stride + 1
    xs = x.tolist()
    ks = kernel.tolist()
    out = np.zeros((n, ho, wo, cout))
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for co in range(cout):
                    acc = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            iy = oy * stride + i * dilation - ph
                            ix = ox * stride + j * dilation - pw
                            if not (0 <= iy < h and 0 <= ix < w):
                                continue
                            for ci in range(cin):
                                acc += xs[b][iy][ix][ci] * ks[i][j][ci][co]
                    out[b, oy, ox, co] = acc + float(bias[co])
    return out


def d2s_loop(x, s):
    n, h, w, c = x.shape
    cb = c // (s * s)
    out = np.empty((n, h * s, w * s, cb), dtype=x.dtype)
    for b in range(n):
        for oy in range(h * s):
            for ox in range(w * s):
                dy, dx = oy % s, ox % s
                for k in range(cb):
                    out[b, oy, ox, k] = x[b, oy // s, ox // s, (dy * s + dx) * cb + k]
    return out


def nearest_loop(x, s):
    n, h, w, c = x.shape
    out = np.empty((n, h * s, w * s, c), dtype=x.dtype)
    for oy in range(h * s):
        for ox in range(w * s):
            out[:, oy, ox, :] = x[:, math.floor(oy / s), math.floor(ox / s), :]
    return out


def central_difference(f, arr, idx, eps):
    """d f / d arr[idx] by central differences; restores ``arr`` afterwards."""
    old = arr[idx]
    arr[idx] = old + eps
    hi = f()
    arr[idx] = old - eps
    lo = f()
    arr[idx] = old
    return (hi - lo) / (2 * eps)


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def adam_scalar(grads, lr, b1=0.9, b2=0.999, eps=1e-8, p0=0.0):
    """Textbook Adam on a single scalar parameter, in Python floats."""
    p, m, v = p0, 0.0, 0.0
    trace = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (math.sqrt(vhat) + eps)
        trace.append(p)
    return trace
