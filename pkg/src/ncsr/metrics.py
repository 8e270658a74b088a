"""PSNR over 8-bit RGB images, computed on all three channels, no border crop."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .image import ImageBuffer

PEAK = 255.0


@dataclass(frozen=True)
class PsnrResult:
    mse: float
    psnr_db: float

    @property
    def is_infinite(self) -> bool:
        return self.mse == 0


def psnr(a: ImageBuffer, b: ImageBuffer) -> PsnrResult:
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"image size mismatch {a.pixels.shape} vs {b.pixels.shape}")
    diff = a.pixels.astype(np.float64) - b.pixels.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0:
        return PsnrResult(0.0, math.inf)
    return PsnrResult(mse, 10.0 * math.log10(PEAK ** 2 / mse))


def psnr_over_set(pairs: list[tuple[ImageBuffer, ImageBuffer]]) -> float:
    """Mean of per-image PSNR; identical pairs (infinite PSNR) are skipped."""
    if not pairs:
        raise ValueError("psnr_over_set needs at least one pair")
    values = []
    for i, (a, b) in enumerate(pairs):
        r = psnr(a, b)
        if r.is_infinite:
            warnings.warn(f"pair {i} is identical (infinite PSNR); excluded from the mean", stacklevel=2)
            continue
        values.append(r.psnr_db)
    if not values:
        return math.inf
    return float(np.mean(values))
