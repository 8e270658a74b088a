"""NHWC tensor value type and the few primitives shared by every module.

Layer kernels in :mod:`ncsr.ops` work on raw ``numpy`` arrays in NHWC order;
:class:`Tensor` wraps such an array together with its quantization
parameters so that int8 values never travel without their scale.
"""
from __future__ import annotations

import enum
import sys
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np


class DType(enum.Enum):
    F32 = "f32"
    I8 = "i8"

    @property
    def numpy(self) -> np.dtype:
        return np.dtype(np.float32 if self is DType.F32 else np.int8)


class Shape(NamedTuple):
    n: int
    h: int
    w: int
    c: int

    @classmethod
    def of(cls, n: int, h: int, w: int, c: int, itemsize: int = 4) -> "Shape":
        """Validated constructor: every extent >= 1 and the buffer addressable."""
        dims = (n, h, w, c)
        for d in dims:
            if int(d) != d or d < 1:
                raise ValueError(f"tensor extents must be positive integers, got {dims}")
        count = int(n) * int(h) * int(w) * int(c)
        if count * itemsize > sys.maxsize:
            raise OverflowError(f"shape {dims} has {count} elements, too large to address")
        return cls(int(n), int(h), int(w), int(c))

    @property
    def size(self) -> int:
        return self.n * self.h * self.w * self.c

    def offset(self, n: int, h: int, w: int, c: int) -> int:
        for i, e, name in zip((n, h, w, c), self, "nhwc"):
            if not 0 <= i < e:
                raise IndexError(f"index {name}={i} out of range [0, {e})")
        return ((n * self.h + h) * self.w + w) * self.c + c

    def unravel(self, offset: int) -> tuple[int, int, int, int]:
        if not 0 <= offset < self.size:
            raise IndexError(f"offset {offset} out of range [0, {self.size})")
        offset, c = divmod(offset, self.c)
        offset, w = divmod(offset, self.w)
        n, h = divmod(offset, self.h)
        return n, h, w, c


@dataclass(frozen=True)
class QuantParams:
    """Affine int8 mapping ``real = scale * (q - zero_point)``."""

    scale: float
    zero_point: int

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not -128 <= self.zero_point <= 127:
            raise ValueError(f"zero_point {self.zero_point} outside [-128, 127]")

    def quantize(self, r: np.ndarray, qmin: int = -128, qmax: int = 127) -> np.ndarray:
        q = round_half_away(np.asarray(r, dtype=np.float64) / self.scale) + self.zero_point
        return np.clip(q, qmin, qmax).astype(np.int8)

    def dequantize(self, q: np.ndarray) -> np.ndarray:
        return (self.scale * (np.asarray(q, dtype=np.float64) - self.zero_point)).astype(np.float32)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (``np.round`` ties to even)."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True, eq=False)
class Tensor:
    data: np.ndarray
    qparams: Optional[QuantParams] = None

    def __post_init__(self) -> None:
        if self.data.ndim != 4:
            raise ValueError(f"expected a 4-D NHWC array, got shape {self.data.shape}")
        if self.data.dtype == np.int8:
            if self.qparams is None:
                raise ValueError("int8 tensor requires QuantParams")
        elif self.data.dtype == np.float32:
            if self.qparams is not None:
                raise ValueError("float32 tensor must not carry QuantParams")
        else:
            raise TypeError(f"unsupported dtype {self.data.dtype}")
        Shape.of(*self.data.shape, itemsize=self.data.itemsize)
        view = self.data.view()
        view.flags.writeable = False
        object.__setattr__(self, "data", view)

    @property
    def shape(self) -> Shape:
        return Shape(*self.data.shape)

    @property
    def dtype(self) -> DType:
        return DType.I8 if self.data.dtype == np.int8 else DType.F32

    def __getitem__(self, idx: tuple[int, int, int, int]) -> float | int:
        return index(self, *idx)

    def dequantize(self) -> np.ndarray:
        if self.qparams is None:
            return self.data
        return self.qparams.dequantize(self.data)


def tensor_new(shape: Shape | tuple, dtype: DType = DType.F32, fill: float = 0.0,
               qparams: Optional[QuantParams] = None) -> Tensor:
    dtype = DType(dtype)
    shape = Shape.of(*shape, itemsize=dtype.numpy.itemsize)
    if dtype is DType.I8 and qparams is None:
        qparams = QuantParams(1.0, 0)
    data = np.full(shape, fill, dtype=dtype.numpy)
    return Tensor(data, qparams if dtype is DType.I8 else None)


def index(t: Tensor, n: int, h: int, w: int, c: int):
    off = t.shape.offset(n, h, w, c)
    return t.data.reshape(-1)[off].item()


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.dtype is not DType.F32 or b.dtype is not DType.F32:
        raise TypeError("add is defined on float32 tensors; use quant.add_q for int8")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return Tensor(a.data + b.data)


def stats(t: Tensor | np.ndarray) -> tuple[float, float]:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.size == 0:
        raise ValueError("stats of an empty tensor")
    return float(data.min()), float(data.max())
