"""8-bit RGB rasters, PNG files, and the bridge to float tensors."""
from __future__ import annotations

import io
import os
import struct
import warnings
import zlib
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .tensor import round_half_away

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_COLOR_TYPES = {0: "grayscale", 2: "RGB", 3: "palette", 4: "grayscale+alpha", 6: "RGBA"}


class PngError(ValueError):
    """Malformed PNG; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.message = message
        self.offset = offset


class UnsupportedPngError(PngError):
    pass


@dataclass(eq=False)
class ImageBuffer:
    pixels: np.ndarray  # (height, width, 3) uint8, row-major

    def __post_init__(self) -> None:
        p = self.pixels
        if p.dtype != np.uint8 or p.ndim != 3 or p.shape[2] != 3:
            raise ValueError(f"ImageBuffer needs (h, w, 3) uint8 pixels, got {p.dtype} {p.shape}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError("image must be at least 1x1")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)


def img_to_tensor(img: ImageBuffer) -> np.ndarray:
    return img.pixels.astype(np.float32)[None]


def tensor_to_img(t: np.ndarray) -> ImageBuffer:
    """Clip to [0, 255] and round half away from zero."""
    if t.ndim != 4 or t.shape[0] != 1 or t.shape[3] != 3:
        raise ValueError(f"expected a (1, h, w, 3) tensor, got {t.shape}")
    px = round_half_away(np.clip(t[0].astype(np.float64), 0, 255))
    return ImageBuffer(px.astype(np.uint8))


def _check_structure(data: bytes) -> dict:
    """Walk the chunk list, verifying lengths, CRCs, and the IHDR header."""
    if data[:8] != PNG_SIGNATURE:
        raise PngError("bad PNG signature", 0)
    pos = 8
    header = None
    first_idat = None
    while True:
        if pos + 8 > len(data):
            raise PngError("truncated chunk header", pos)
        length, ctype = struct.unpack(">I4s", data[pos:pos + 8])
        end = pos + 12 + length
        if end > len(data):
            raise PngError(f"chunk {ctype!r} runs past end of file", pos)
        body = data[pos + 8:pos + 8 + length]
        (crc,) = struct.unpack(">I", data[pos + 8 + length:end])
        if zlib.crc32(ctype + body) & 0xFFFFFFFF != crc:
            raise PngError(f"CRC mismatch in chunk {ctype!r}", pos)
        if header is None:
            if ctype != b"IHDR" or length != 13:
                raise PngError("first chunk must be a 13-byte IHDR", pos)
            w, h, depth, color, comp, filt, interlace = struct.unpack(">IIBBBBB", body)
            if w == 0 or h == 0:
                raise PngError("zero image dimension", pos + 8)
            if color not in _COLOR_TYPES:
                raise PngError(f"invalid color type {color}", pos + 17)
            if depth != 8:
                raise UnsupportedPngError(
                    f"unsupported bit depth {depth} for {_COLOR_TYPES[color]} (only 8-bit)", pos + 16)
            header = {"width": w, "height": h, "color_type": color}
        elif ctype == b"IDAT":
            if first_idat is None:
                first_idat = pos
        elif ctype == b"IEND":
            if first_idat is None:
                raise PngError("no IDAT chunk before IEND", pos)
            header["idat_offset"] = first_idat
            return header
        pos = end


def decode_png(data: bytes) -> ImageBuffer:
    header = _check_structure(data)
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            if im.mode in ("LA", "RGBA", "PA") or "transparency" in im.info:
                warnings.warn("PNG alpha channel dropped", stacklevel=3)
            px = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, SyntaxError, zlib.error) as exc:
        raise PngError(f"corrupt image data: {exc}", header["idat_offset"]) from exc
    if px.shape[:2] != (header["height"], header["width"]):
        raise PngError("decoded size disagrees with IHDR", 16)
    return ImageBuffer(np.ascontiguousarray(px))


def load_png(path: str | os.PathLike) -> ImageBuffer:
    with open(path, "rb") as f:
        data = f.read()
    try:
        return decode_png(data)
    except PngError as exc:
        raise type(exc)(f"{os.fspath(path)}: {exc.message}", exc.offset) from None


def encode_png(img: ImageBuffer) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(img.pixels).save(buf, format="PNG")
    return buf.getvalue()


def save_png(img: ImageBuffer, path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        f.write(encode_png(img))
