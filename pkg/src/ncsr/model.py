"""The NCNet graph: a plain 3x3 conv backbone plus the frozen nearest branch.

    hr = depth_to_space(backbone(lr) + nearest_conv(lr), s)

Everything runs in the 0-255 RGB float domain; clipping and rounding happen
only in :func:`upscale`, when an image is materialized.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .image import ImageBuffer, img_to_tensor, tensor_to_img
from .nearest import NearestConvWeights, build_nearest_conv, nearest_conv_forward


@dataclass(frozen=True)
class ModelSpec:
    scale: int = 3
    num_layers: int = 7
    channels: int = 32
    in_channels: int = 3

    def __post_init__(self) -> None:
        if self.scale < 1 or self.num_layers < 1 or self.channels < 1:
            raise ValueError(f"invalid model spec {self}")
        if self.in_channels != 3:
            raise ValueError("the nearest branch is defined for RGB input only")

    @property
    def out_channels(self) -> int:
        return 3 * self.scale ** 2

    def layer_channels(self) -> list[tuple[int, int]]:
        dims = [self.in_channels] + [self.channels] * (self.num_layers - 1) + [self.out_channels]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(eq=False)
class ModelWeights:
    spec: ModelSpec
    convs: list[ops.ConvWeights]
    nearest: NearestConvWeights = field(init=False)

    def __post_init__(self) -> None:
        expected = self.spec.layer_channels()
        if len(self.convs) != len(expected):
            raise ValueError(f"expected {len(expected)} conv layers, got {len(self.convs)}")
        for i, (conv, (cin, cout)) in enumerate(zip(self.convs, expected)):
            if conv.kernel.shape != (3, 3, cin, cout):
                raise ValueError(f"conv{i} kernel {conv.kernel.shape} != {(3, 3, cin, cout)}")
            if not (np.isfinite(conv.kernel).all() and np.isfinite(conv.bias).all()):
                raise ValueError(f"conv{i} has non-finite weights")
        self.nearest = build_nearest_conv(self.spec.scale)

    def named_params(self) -> dict[str, np.ndarray]:
        """Trainable arrays by file name; the arrays are live, not copies."""
        out = {}
        for i, conv in enumerate(self.convs):
            out[f"conv{i}.kernel"] = conv.kernel
            out[f"conv{i}.bias"] = conv.bias
        return out

    @classmethod
    def from_named(cls, params: dict[str, np.ndarray], scale: int | None = None) -> "ModelWeights":
        n = 0
        while f"conv{n}.kernel" in params:
            n += 1
        if n == 0:
            raise ValueError("no conv layers found")
        first, last = params["conv0.kernel"], params[f"conv{n - 1}.kernel"]
        s = int(round((last.shape[3] / 3) ** 0.5))
        if 3 * s * s != last.shape[3]:
            raise ValueError(f"final layer has {last.shape[3]} channels, not 3*s^2")
        if scale is not None and scale != s:
            raise ValueError(f"weights are for scale {s}, requested scale {scale}")
        spec = ModelSpec(scale=s, num_layers=n, channels=first.shape[3] if n > 1 else 32)
        convs = [ops.ConvWeights(np.ascontiguousarray(params[f"conv{i}.kernel"], dtype=np.float32),
                                 np.ascontiguousarray(params[f"conv{i}.bias"], dtype=np.float32))
                 for i in range(n)]
        return cls(spec, convs)

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.spec, [ops.ConvWeights(c.kernel.copy(), c.bias.copy()) for c in self.convs])


def xavier_bound(kh: int, kw: int, cin: int, cout: int) -> float:
    return float(np.sqrt(6.0 / (kh * kw * cin + kh * kw * cout)))


def init_weights(spec: ModelSpec, seed: int = 0) -> ModelWeights:
    rng = np.random.default_rng(seed)
    convs = []
    for cin, cout in spec.layer_channels():
        bound = xavier_bound(3, 3, cin, cout)
        kernel = rng.uniform(-bound, bound, size=(3, 3, cin, cout)).astype(np.float32)
        convs.append(ops.ConvWeights(kernel, np.zeros(cout, dtype=np.float32)))
    return ModelWeights(spec, convs)


def zero_weights(spec: ModelSpec) -> ModelWeights:
    convs = [ops.ConvWeights(np.zeros((3, 3, cin, cout), np.float32), np.zeros(cout, np.float32))
             for cin, cout in spec.layer_channels()]
    return ModelWeights(spec, convs)


def _check_input(y: np.ndarray) -> None:
    if y.ndim != 4 or y.shape[3] != 3:
        raise ValueError(f"expected (n, h, w, 3) input, got {y.shape}")


def forward_cached(y: np.ndarray, m: ModelWeights, fused_nearest: bool = True
                   ) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass that also returns every conv's pre-activation output."""
    _check_input(y)
    a = y
    pre = []
    last = len(m.convs) - 1
    for i, conv in enumerate(m.convs):
        z = ops.conv2d(a, conv)
        pre.append(z)
        a = ops.relu(z) if i < last else z
    summed = a + nearest_conv_forward(y.astype(a.dtype, copy=False), m.nearest, fused=fused_nearest)
    return ops.depth_to_space(summed, m.spec.scale), pre


def forward(y: np.ndarray, m: ModelWeights, fused_nearest: bool = True) -> np.ndarray:
    return forward_cached(y, m, fused_nearest)[0]


def l1_loss(pred: np.ndarray, target: np.ndarray) -> float:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred.astype(np.float64) - target)))


def l1_loss_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Subgradient of the mean absolute error; zero where pred == target."""
    return (np.sign(pred - target) / pred.size).astype(pred.dtype)


def forward_backward(y: np.ndarray, x_target: np.ndarray, m: ModelWeights
                     ) -> tuple[float, dict[str, np.ndarray]]:
    """L1 loss and its gradient for every backbone parameter.

    The nearest branch has no parameters to update and gets no gradient.
    """
    out, pre = forward_cached(y, m)
    if x_target.shape != out.shape:
        raise ValueError(f"target {x_target.shape} does not match output {out.shape}")
    loss = l1_loss(out, x_target)
    g = ops.space_to_depth(l1_loss_grad(out, x_target), m.spec.scale)
    grads = {}
    for i in range(len(m.convs) - 1, -1, -1):
        if i < len(m.convs) - 1:
            g = ops.relu_backward(pre[i], g)
        a_in = y if i == 0 else ops.relu(pre[i - 1])
        g, grads[f"conv{i}.kernel"], grads[f"conv{i}.bias"] = ops.conv2d_backward(a_in, m.convs[i], g)
    return loss, grads


def upscale(img: ImageBuffer, m: ModelWeights) -> ImageBuffer:
    return tensor_to_img(forward(img_to_tensor(img), m))
