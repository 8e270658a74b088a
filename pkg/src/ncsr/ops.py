"""Forward and backward layer kernels on NHWC ``numpy`` arrays.

Every op preserves the floating dtype of its input (float32 in the engine,
float64 when gradient checks need headroom). No op broadcasts.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

Padding = Literal["same", "valid"]


@dataclass
class ConvWeights:
    kernel: np.ndarray  # [kh, kw, c_in, c_out]
    bias: np.ndarray  # [c_out]
    stride: int = 1
    padding: Padding = "same"
    dilation: int = 1

    def __post_init__(self) -> None:
        if self.kernel.ndim != 4:
            raise ValueError(f"kernel must be [kh, kw, c_in, c_out], got {self.kernel.shape}")
        kh, kw, _, c_out = self.kernel.shape
        if self.bias.shape != (c_out,):
            raise ValueError(f"bias shape {self.bias.shape} does not match c_out={c_out}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {self.padding!r}")
        if self.padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
            raise ValueError("same padding needs odd kernel extents")
        if self.stride < 1 or self.dilation < 1:
            raise ValueError("stride and dilation must be >= 1")

    @property
    def c_in(self) -> int:
        return self.kernel.shape[2]

    @property
    def c_out(self) -> int:
        return self.kernel.shape[3]

    def pads(self) -> tuple[int, int]:
        if self.padding == "valid":
            return 0, 0
        kh, kw = self.kernel.shape[:2]
        return self.dilation * (kh - 1) // 2, self.dilation * (kw - 1) // 2

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel.shape[:2]
        ph, pw = self.pads()
        ho = (h + 2 * ph - self.dilation * (kh - 1) - 1) // self.stride + 1
        wo = (w + 2 * pw - self.dilation * (kw - 1) - 1) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"input {h}x{w} too small for kernel {kh}x{kw}")
        return ho, wo


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def tap_matrix(xp: np.ndarray, w: ConvWeights, i: int, j: int, ho: int, wo: int) -> np.ndarray:
    """Input window seen by kernel tap (i, j), as a (N*ho*wo, c_in) matrix."""
    d, s = w.dilation, w.stride
    win = xp[:, i * d: i * d + (ho - 1) * s + 1: s, j * d: j * d + (wo - 1) * s + 1: s, :]
    return win.reshape(-1, xp.shape[3])


def pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def conv2d(x: np.ndarray, w: ConvWeights) -> np.ndarray:
    """Cross-correlation, accumulated tap by tap in (kh, kw) order.

    Each tap contributes one ``(N*Ho*Wo, c_in) @ (c_in, c_out)`` product, so the
    sum over c_in happens inside the GEMM and the tap order is fixed.
    """
    if x.ndim != 4 or x.shape[3] != w.c_in:
        raise ValueError(f"input {x.shape} does not have c_in={w.c_in} channels")
    n, h, wd, _ = x.shape
    ho, wo = w.output_hw(h, wd)
    dtype = np.result_type(x.dtype, np.float32)
    kernel = w.kernel.astype(dtype, copy=False)
    xp = pad_hw(x.astype(dtype, copy=False), *w.pads())
    kh, kw = kernel.shape[:2]
    out = None
    for i in range(kh):
        for j in range(kw):
            part = tap_matrix(xp, w, i, j, ho, wo) @ kernel[i, j]
            if out is None:
                out = part
            else:
                out += part
    out += w.bias.astype(dtype, copy=False)
    return out.reshape(n, ho, wo, w.c_out)


def conv2d_backward(x: np.ndarray, w: ConvWeights, grad_out: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, h, wd, _ = x.shape
    ho, wo = w.output_hw(h, wd)
    if grad_out.shape != (n, ho, wo, w.c_out):
        raise ValueError(f"grad_out {grad_out.shape} does not match forward output {(n, ho, wo, w.c_out)}")
    dtype = np.result_type(x.dtype, grad_out.dtype, np.float32)
    kernel = w.kernel.astype(dtype, copy=False)
    ph, pw = w.pads()
    xp = pad_hw(x.astype(dtype, copy=False), ph, pw)
    g = grad_out.astype(dtype, copy=False).reshape(-1, w.c_out)

    grad_w = np.empty(kernel.shape, dtype=dtype)
    grad_xp = np.zeros(xp.shape, dtype=dtype)
    d, s = w.dilation, w.stride
    kh, kw = kernel.shape[:2]
    for i in range(kh):
        for j in range(kw):
            grad_w[i, j] = tap_matrix(xp, w, i, j, ho, wo).T @ g
            gx = (g @ kernel[i, j].T).reshape(n, ho, wo, -1)
            grad_xp[:, i * d: i * d + (ho - 1) * s + 1: s, j * d: j * d + (wo - 1) * s + 1: s, :] += gx
    grad_x = grad_xp[:, ph: ph + h, pw: pw + wd, :]
    grad_b = g.sum(axis=0)
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    _check_same(x, grad_out)
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def depth_to_space(x: np.ndarray, s: int) -> np.ndarray:
    """out[n, h*s+dy, w*s+dx, c] = x[n, h, w, (dy*s+dx)*C + c] with C = channels/s^2."""
    n, h, w, ch = x.shape
    if s < 1 or ch % (s * s):
        raise ValueError(f"{ch} channels not divisible by s^2 = {s * s}")
    c = ch // (s * s)
    y = x.reshape(n, h, w, s, s, c).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(n, h * s, w * s, c)


def space_to_depth(x: np.ndarray, s: int) -> np.ndarray:
    n, h, w, c = x.shape
    if s < 1 or h % s or w % s:
        raise ValueError(f"spatial extents {h}x{w} not divisible by {s}")
    y = x.reshape(n, h // s, s, w // s, s, c).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(n, h // s, w // s, s * s * c)


def nearest_upsample(x: np.ndarray, s: int) -> np.ndarray:
    if s < 1:
        raise ValueError(f"scale must be >= 1, got {s}")
    return np.repeat(np.repeat(x, s, axis=1), s, axis=2)


def bilinear_taps(n_in: int, s: int, align: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dst = np.arange(n_in * s, dtype=np.float64)
    if align == "half_pixel":
        src = (dst + 0.5) / s - 0.5
    elif align == "asymmetric":
        src = dst / s
    else:
        raise ValueError(f"unknown alignment {align!r}")
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_upsample(x: np.ndarray, s: int, align: str = "half_pixel") -> np.ndarray:
    """Separable bilinear interpolation with edge clamp.

    ``half_pixel`` maps output pixel ``d`` to source coordinate ``(d + 0.5)/s - 0.5``;
    ``asymmetric`` uses ``d/s``.
    """
    if s < 1:
        raise ValueError(f"scale must be >= 1, got {s}")
    dtype = x.dtype
    xf = x.astype(np.float64)
    i0, i1, f = bilinear_taps(x.shape[1], s, align)
    f = f[None, :, None, None]
    xf = xf[:, i0] * (1 - f) + xf[:, i1] * f
    j0, j1, g = bilinear_taps(x.shape[2], s, align)
    g = g[None, None, :, None]
    xf = xf[:, :, j0] * (1 - g) + xf[:, :, j1] * g
    return xf.astype(dtype)


def multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same(a, b)
    return a * b


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[:3] != b.shape[:3]:
        raise ValueError(f"cannot concat {a.shape} and {b.shape} on channels")
    return np.concatenate([a, b], axis=3)


def split_channels(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < k < x.shape[3]:
        raise ValueError(f"split point {k} outside (0, {x.shape[3]})")
    return x[..., :k], x[..., k:]


def leaky_relu(x: np.ndarray, alpha: float = 0.2) -> np.ndarray:
    return np.where(x > 0, x, x * np.asarray(alpha, dtype=x.dtype))


def global_avgpool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(1, 2), keepdims=True, dtype=np.float64).astype(x.dtype)


def global_maxpool(x: np.ndarray) -> np.ndarray:
    return x.max(axis=(1, 2), keepdims=True)
