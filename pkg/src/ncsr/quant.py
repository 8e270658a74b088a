"""Post-training int8 quantization and the integer-only inference path.

Scheme: symmetric per-tensor int8 weights (zero point 0, range [-127, 127]),
asymmetric per-tensor int8 activations calibrated by min/max, int32 biases
at scale ``in_scale * w_scale``. Rescaling between scales never touches a
float: each ratio is a 31-bit fixed-point multiplier plus a rounding right
shift.

Activation edges of a model with L conv layers::

    edge0          network input (uint8 image, fixed scale 1 / zero point -128)
    edge1..edgeL   output of conv i (after its fused ReLU, except the last)
    edge{L+1}      nearest-convolution branch
    edge{L+2}      residual sum fed to depth-to-space
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .image import ImageBuffer, img_to_tensor, tensor_to_img
from .metrics import psnr_over_set
from .model import ModelWeights, upscale
from .nearest import build_nearest_conv, nearest_conv_forward
from .tensor import QuantParams, Tensor, round_half_away

MIN_SCALE = 1e-8
INPUT_QPARAMS = QuantParams(1.0, -128)
# The pre-D2S sum is only ever dequantized and clipped to uint8, so its codes
# map one-to-one onto output pixel values.
OUTPUT_QPARAMS = QuantParams(1.0, -128)
_F32_EXACT = 2 ** 24


def quantize_multiplier(m: float) -> tuple[int, int]:
    """Split a positive real into ``(m0, shift)`` with ``m ~= m0 * 2**-shift``.

    ``m0`` lies in [2^30, 2^31); ``shift`` is capped at 62 so the int64
    product ``acc * m0`` plus its rounding term never overflows.
    """
    if not m > 0 or not math.isfinite(m):
        raise ValueError(f"multiplier must be positive and finite, got {m}")
    frac, exp = math.frexp(m)
    m0 = int(round(frac * (1 << 31)))
    if m0 == 1 << 31:
        m0 //= 2
        exp += 1
    shift = 31 - exp
    if shift < 1:
        raise ValueError(f"multiplier {m} too large for fixed-point requantization")
    if shift > 62:
        m0 >>= shift - 62
        shift = 62
    return m0, shift


def requantize(acc: np.ndarray, m0: int, shift: int) -> np.ndarray:
    """``round(acc * m0 / 2**shift)`` with ties away from zero, in int64."""
    prod = np.asarray(acc, dtype=np.int64) * np.int64(m0)
    mag = (np.abs(prod) + (np.int64(1) << np.int64(shift - 1))) >> np.int64(shift)
    return np.where(prod < 0, -mag, mag)


def requantize_reference(acc: np.ndarray, m: float) -> np.ndarray:
    return round_half_away(np.asarray(acc, dtype=np.float64) * m).astype(np.int64)


@dataclass(frozen=True)
class Rescale:
    """A fixed-point multiplier ready to apply."""

    real: float
    m0: int
    shift: int

    @classmethod
    def of(cls, real: float) -> "Rescale":
        return cls(real, *quantize_multiplier(real))

    def __call__(self, acc: np.ndarray) -> np.ndarray:
        return requantize(acc, self.m0, self.shift)


def activation_qparams(lo: float, hi: float) -> QuantParams:
    """Asymmetric params for the range [lo, hi] widened to contain 0."""
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    scale = (hi - lo) / 255.0
    if scale < MIN_SCALE:
        warnings.warn(f"degenerate activation range [{lo}, {hi}]; scale floored at {MIN_SCALE}",
                      stacklevel=2)
        scale = MIN_SCALE
    scale = float(np.float32(scale))  # stored as f32 in model files
    zp = int(np.clip(round_half_away(-128 - lo / scale), -128, 127))
    return QuantParams(scale, zp)


def quantize_weights(w: np.ndarray) -> tuple[np.ndarray, QuantParams]:
    scale = float(np.max(np.abs(w))) / 127.0 if w.size else 0.0
    if scale < MIN_SCALE:
        warnings.warn(f"degenerate weight range; scale floored at {MIN_SCALE}", stacklevel=2)
        scale = MIN_SCALE
    qp = QuantParams(float(np.float32(scale)), 0)
    return qp.quantize(w, -127, 127), qp


# -- calibration ------------------------------------------------------------


@dataclass
class CalibrationStats:
    edges: dict[int, tuple[float, float]] = field(default_factory=dict)
    weights: dict[str, tuple[float, float]] = field(default_factory=dict)
    num_images: int = 0

    def observe(self, edge: int, values: np.ndarray) -> None:
        lo, hi = float(values.min()), float(values.max())
        if edge in self.edges:
            old_lo, old_hi = self.edges[edge]
            lo, hi = min(lo, old_lo), max(hi, old_hi)
        self.edges[edge] = (lo, hi)

    def merge(self, other: "CalibrationStats") -> "CalibrationStats":
        out = CalibrationStats(dict(self.edges), dict(self.weights), self.num_images + other.num_images)
        for k, (lo, hi) in other.edges.items():
            if k in out.edges:
                lo, hi = min(lo, out.edges[k][0]), max(hi, out.edges[k][1])
            out.edges[k] = (lo, hi)
        out.weights.update(other.weights)
        return out


def num_edges(m: ModelWeights) -> int:
    return len(m.convs) + 3


def calibrate(m: ModelWeights, images: list[ImageBuffer]) -> CalibrationStats:
    if not images:
        raise ValueError("calibration needs at least one image")
    stats = CalibrationStats()
    for name, arr in m.named_params().items():
        stats.weights[name] = (float(arr.min()), float(arr.max()))
    last = len(m.convs) - 1
    for img in images:
        y = img_to_tensor(img)
        stats.observe(0, y)
        a = y
        for i, conv in enumerate(m.convs):
            a = ops.conv2d(a, conv)
            if i < last:
                a = ops.relu(a)
            stats.observe(i + 1, a)
        nc = nearest_conv_forward(y, m.nearest, fused=True)
        stats.observe(last + 2, nc)
        stats.observe(last + 3, a + nc)
        stats.num_images += 1
    return stats


# -- quantized model ----------------------------------------------------------


@dataclass(eq=False)
class QConv:
    kernel: np.ndarray  # int8 [kh, kw, c_in, c_out]
    bias: np.ndarray  # int32 [c_out]
    w_qp: QuantParams
    in_qp: QuantParams
    out_qp: QuantParams
    relu: bool = False
    stride: int = 1
    padding: ops.Padding = "same"
    dilation: int = 1
    rescale: Rescale = field(init=False)

    def __post_init__(self) -> None:
        self.rescale = Rescale.of(self.in_qp.scale * self.w_qp.scale / self.out_qp.scale)

    @property
    def geometry(self) -> ops.ConvWeights:
        return ops.ConvWeights(self.kernel, self.bias, self.stride, self.padding, self.dilation)

    @classmethod
    def from_float(cls, conv: ops.ConvWeights, in_qp: QuantParams, out_qp: QuantParams,
                   relu: bool = False) -> "QConv":
        qk, w_qp = quantize_weights(conv.kernel)
        bias_scale = in_qp.scale * w_qp.scale
        qb = np.clip(round_half_away(conv.bias.astype(np.float64) / bias_scale),
                     -2 ** 31, 2 ** 31 - 1).astype(np.int32)
        return cls(qk, qb, w_qp, in_qp, out_qp, relu, conv.stride, conv.padding, conv.dilation)


def int_conv_accumulate(xq: np.ndarray, zero_point: int, geom: ops.ConvWeights) -> np.ndarray:
    """Exact int32 accumulator ``sum((x - zp) * w) + bias`` for an int8 conv.

    Products and partial sums are integers; the GEMMs run in float32 when the
    worst-case magnitude stays below 2^24 (exact there) and in float64
    otherwise, which is bit-identical to an int32 loop but uses BLAS.
    """
    n, h, w, cin = xq.shape
    if cin != geom.c_in:
        raise ValueError(f"input has {cin} channels, kernel expects {geom.c_in}")
    ho, wo = geom.output_hw(h, w)
    kh, kw = geom.kernel.shape[:2]
    bound = kh * kw * cin * 255 * 127
    ftype = np.float32 if bound < _F32_EXACT else np.float64
    xs = xq.astype(ftype) - ftype(zero_point)
    xp = ops.pad_hw(xs, *geom.pads())
    kernel = geom.kernel.astype(ftype)
    acc = None
    for i in range(kh):
        for j in range(kw):
            part = ops.tap_matrix(xp, geom, i, j, ho, wo) @ kernel[i, j]
            if acc is None:
                acc = part
            else:
                acc += part
    acc = acc.astype(np.int64) + geom.bias.astype(np.int64)
    return acc.reshape(n, ho, wo, geom.c_out)


def qconv2d(x: Tensor, layer: QConv) -> Tensor:
    acc = int_conv_accumulate(x.data, x.qparams.zero_point, layer.geometry)
    z = layer.out_qp.zero_point
    q = layer.rescale(acc) + z
    lo = z if layer.relu else -128
    return Tensor(np.clip(q, lo, 127).astype(np.int8), layer.out_qp)


def rescale_to(t: Tensor, qp: QuantParams) -> np.ndarray:
    """``t`` re-expressed around zero at scale ``qp.scale`` (int64, zero point not added)."""
    v = t.data.astype(np.int64) - t.qparams.zero_point
    if t.qparams.scale == qp.scale:
        return v
    return Rescale.of(t.qparams.scale / qp.scale)(v)


def _saturate(v: np.ndarray, qp: QuantParams) -> Tensor:
    return Tensor(np.clip(v + qp.zero_point, -128, 127).astype(np.int8), qp)


def qadd(a: Tensor, b: Tensor, out_qp: QuantParams) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return _saturate(rescale_to(a, out_qp) + rescale_to(b, out_qp), out_qp)


def qmultiply(a: Tensor, b: Tensor, out_qp: QuantParams) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    prod = ((a.data.astype(np.int64) - a.qparams.zero_point)
            * (b.data.astype(np.int64) - b.qparams.zero_point))
    r = Rescale.of(a.qparams.scale * b.qparams.scale / out_qp.scale)
    return _saturate(r(prod), out_qp)


def qconcat(a: Tensor, b: Tensor, out_qp: QuantParams) -> Tensor:
    if a.shape[:3] != b.shape[:3]:
        raise ValueError("concat needs matching n, h, w")
    return _saturate(np.concatenate([rescale_to(a, out_qp), rescale_to(b, out_qp)], axis=3), out_qp)


def qsplit(t: Tensor, k: int) -> tuple[Tensor, Tensor]:
    lo, hi = ops.split_channels(t.data, k)
    return Tensor(np.ascontiguousarray(lo), t.qparams), Tensor(np.ascontiguousarray(hi), t.qparams)


def qrelu(t: Tensor) -> Tensor:
    return Tensor(np.maximum(t.data, np.int8(t.qparams.zero_point)), t.qparams)


def qleaky_relu(t: Tensor, out_qp: QuantParams, alpha: float = 0.2) -> Tensor:
    v = t.data.astype(np.int64) - t.qparams.zero_point
    pos = Rescale.of(t.qparams.scale / out_qp.scale)
    neg = Rescale.of(alpha * t.qparams.scale / out_qp.scale)
    return _saturate(np.where(v > 0, pos(v), neg(v)), out_qp)


def qglobal_avgpool(t: Tensor) -> Tensor:
    v = t.data.astype(np.int64) - t.qparams.zero_point
    count = t.shape.h * t.shape.w
    total = v.sum(axis=(1, 2), keepdims=True)
    return _saturate(Rescale.of(1.0 / count)(total), t.qparams)


def qglobal_maxpool(t: Tensor) -> Tensor:
    return Tensor(t.data.max(axis=(1, 2), keepdims=True), t.qparams)


def qdepth_to_space(t: Tensor, s: int) -> Tensor:
    return Tensor(np.ascontiguousarray(ops.depth_to_space(t.data, s)), t.qparams)


def qnearest_upsample(t: Tensor, s: int) -> Tensor:
    return Tensor(ops.nearest_upsample(t.data, s), t.qparams)


@dataclass(eq=False)
class QuantizedModel:
    scale: int
    layers: list[QConv]
    nearest: QConv
    sum_qp: QuantParams

    @property
    def input_qp(self) -> QuantParams:
        return self.layers[0].in_qp

    def edge_qparams(self) -> list[QuantParams]:
        return [self.input_qp] + [l.out_qp for l in self.layers] + [self.nearest.out_qp, self.sum_qp]


def nearest_qconv(s: int, qp: QuantParams) -> QConv:
    """Int8 nearest branch; identity weights quantize to exactly 127."""
    return QConv.from_float(build_nearest_conv(s).as_conv(), qp, qp)


def quantize_model(m: ModelWeights, stats: CalibrationStats) -> QuantizedModel:
    missing = [e for e in range(num_edges(m)) if e not in stats.edges]
    if missing:
        raise ValueError(f"calibration stats missing edges {missing}")
    for e, (lo, hi) in stats.edges.items():
        if lo > hi:
            raise ValueError(f"edge{e} has min {lo} > max {hi}")
    # the input edge is a uint8 image, so its exact range is known up front
    in_qp = INPUT_QPARAMS
    layers = []
    last = len(m.convs) - 1
    for i, conv in enumerate(m.convs):
        out_qp = activation_qparams(*stats.edges[i + 1])
        layers.append(QConv.from_float(conv, in_qp, out_qp, relu=i < last))
        in_qp = out_qp
    sum_qp = OUTPUT_QPARAMS
    return QuantizedModel(m.spec.scale, layers, nearest_qconv(m.spec.scale, INPUT_QPARAMS), sum_qp)


def quantize_input(img: ImageBuffer, qp: QuantParams = INPUT_QPARAMS) -> Tensor:
    return Tensor(qp.quantize(img.pixels[None].astype(np.float64)), qp)


def quantized_forward_q(x: Tensor, qm: QuantizedModel, fused_nearest: bool = True) -> Tensor:
    """Integer graph from the quantized input to the quantized HR tensor."""
    a = x
    for layer in qm.layers:
        a = qconv2d(a, layer)
    if fused_nearest:
        nc = Tensor(np.tile(x.data, (1, 1, 1, qm.scale ** 2)), x.qparams)
    else:
        nc = qconv2d(x, qm.nearest)
    return qdepth_to_space(qadd(a, nc, qm.sum_qp), qm.scale)


def quantized_forward(y: ImageBuffer, qm: QuantizedModel, fused_nearest: bool = True) -> ImageBuffer:
    out = quantized_forward_q(quantize_input(y, qm.input_qp), qm, fused_nearest)
    return tensor_to_img(out.dequantize().astype(np.float64))


@dataclass(frozen=True)
class ParityReport:
    psnr_f32: float
    psnr_i8: float

    @property
    def delta(self) -> float:
        return self.psnr_f32 - self.psnr_i8


def parity_report(m: ModelWeights, qm: QuantizedModel, lr_images: list[ImageBuffer],
                  hr_images: list[ImageBuffer]) -> ParityReport:
    if len(lr_images) != len(hr_images):
        raise ValueError(f"{len(lr_images)} LR images vs {len(hr_images)} HR images")
    f32 = [(upscale(lr, m), hr) for lr, hr in zip(lr_images, hr_images)]
    i8 = [(quantized_forward(lr, qm), hr) for lr, hr in zip(lr_images, hr_images)]
    return ParityReport(psnr_over_set(f32), psnr_over_set(i8))


def qbilinear_upsample(t: Tensor, s: int, align: str = "half_pixel") -> Tensor:
    """Bilinear upsampling on int8 codes with 10-bit fixed-point tap weights per axis."""
    one = 1 << 10
    v = t.data.astype(np.int64)
    i0, i1, f = ops.bilinear_taps(t.shape.h, s, align)
    wf = np.rint(f * one).astype(np.int64)[None, :, None, None]
    v = v[:, i0] * (one - wf) + v[:, i1] * wf
    j0, j1, g = ops.bilinear_taps(t.shape.w, s, align)
    wg = np.rint(g * one).astype(np.int64)[None, None, :, None]
    v = v[:, :, j0] * (one - wg) + v[:, :, j1] * wg
    shift = np.int64(20)
    mag = (np.abs(v) + (np.int64(1) << (shift - 1))) >> shift
    return Tensor(np.where(v < 0, -mag, mag).astype(np.int8), t.qparams)
