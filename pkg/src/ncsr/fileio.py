"""Weight containers and dataset manifests.

Weight file layout (all integers little-endian)::

    b"NCNETWTS"  u32 version  u32 tensor_count
    per tensor:  u16 name_len  name(utf-8)  u8 dtype  u8 rank  u32 dims[rank]  payload
                 [version 2 only: f32 scale  i32 zero_point]

dtype codes: 0 = f32, 1 = i8, 2 = i32. Version 1 stores a float model,
version 2 a quantized one whose activation parameters appear as scalar
tensors ``edge{i}.scale`` / ``edge{i}.zp``. The nearest-convolution weights
are never stored; they follow from the scale.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from .image import ImageBuffer, load_png
from .model import ModelWeights
from .quant import QConv, QuantizedModel, nearest_qconv
from .tensor import QuantParams

MAGIC = b"NCNETWTS"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("i1"), 2: np.dtype("<i4")}
_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.int8): 1, np.dtype(np.int32): 2}


class WeightFileError(ValueError):
    pass


Record = tuple[np.ndarray, QuantParams | None]


def write_container(path: str | os.PathLike, tensors: dict[str, Record], version: int) -> None:
    if version not in (1, 2):
        raise ValueError(f"cannot write version {version}")
    chunks = [MAGIC, struct.pack("<II", version, len(tensors))]
    for name, (arr, qp) in tensors.items():
        code = _DTYPE_CODE.get(arr.dtype)
        if code is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        if version == 1 and code != 0:
            raise TypeError(f"{name}: version 1 files hold float32 tensors only")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())
        if version == 2:
            qp = qp or QuantParams(1.0, 0)
            chunks.append(struct.pack("<fi", qp.scale, qp.zero_point))
    Path(path).write_bytes(b"".join(chunks))


def read_container(path: str | os.PathLike) -> tuple[int, dict[str, Record]]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise WeightFileError(f"{path}: truncated at byte {pos}")
        out = data[pos:pos + n]
        pos += n
        return out

    if take(8) != MAGIC:
        raise WeightFileError(f"{path}: not an NCNETWTS weight file")
    version, count = struct.unpack("<II", take(8))
    if version not in (1, 2):
        raise WeightFileError(f"{path}: unsupported version {version}")
    tensors: dict[str, Record] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _CODES:
            raise WeightFileError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _CODES[code]
        count_el = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(count_el * dt.itemsize), dtype=dt).reshape(dims)
        arr = arr.astype(dt.newbyteorder("="))
        qp = None
        if version == 2:
            scale, zp = struct.unpack("<fi", take(8))
            qp = QuantParams(float(scale), zp) if code != 0 or (scale, zp) != (1.0, 0) else None
        tensors[name] = (arr, qp)
    if pos != len(data):
        raise WeightFileError(f"{path}: {len(data) - pos} trailing bytes")
    return version, tensors


def save_weights(m: ModelWeights, path: str | os.PathLike) -> None:
    write_container(path, {k: (v, None) for k, v in m.named_params().items()}, version=1)


def save_quantized(qm: QuantizedModel, path: str | os.PathLike) -> None:
    tensors: dict[str, Record] = {}
    for i, layer in enumerate(qm.layers):
        tensors[f"conv{i}.kernel"] = (layer.kernel, layer.w_qp)
        tensors[f"conv{i}.bias"] = (layer.bias, QuantParams(layer.in_qp.scale * layer.w_qp.scale, 0))
    for e, qp in enumerate(qm.edge_qparams()):
        tensors[f"edge{e}.scale"] = (np.array(qp.scale, dtype=np.float32), None)
        tensors[f"edge{e}.zp"] = (np.array(qp.zero_point, dtype=np.int32), None)
    write_container(path, tensors, version=2)


def _quantized_from(tensors: dict[str, Record], path) -> QuantizedModel:
    n = 0
    while f"conv{n}.kernel" in tensors:
        n += 1
    try:
        edges = [QuantParams(float(tensors[f"edge{e}.scale"][0]), int(tensors[f"edge{e}.zp"][0]))
                 for e in range(n + 3)]
        layers = []
        for i in range(n):
            kernel, w_qp = tensors[f"conv{i}.kernel"]
            bias, _ = tensors[f"conv{i}.bias"]
            layers.append(QConv(kernel, bias, w_qp, edges[i], edges[i + 1], relu=i < n - 1))
    except KeyError as exc:
        raise WeightFileError(f"{path}: missing tensor {exc.args[0]}") from None
    if n == 0:
        raise WeightFileError(f"{path}: no conv layers")
    c_out = layers[-1].kernel.shape[3]
    s = int(round((c_out / 3) ** 0.5))
    if 3 * s * s != c_out:
        raise WeightFileError(f"{path}: final layer has {c_out} channels, not 3*s^2")
    return QuantizedModel(s, layers, nearest_qconv(s, edges[0]), edges[n + 2])


def load_any(path: str | os.PathLike) -> Union[ModelWeights, QuantizedModel]:
    version, tensors = read_container(path)
    if version == 1:
        try:
            return ModelWeights.from_named({k: v for k, (v, _) in tensors.items()})
        except (KeyError, ValueError) as exc:
            raise WeightFileError(f"{path}: {exc}") from None
    return _quantized_from(tensors, path)


def load_weights(path: str | os.PathLike) -> ModelWeights:
    m = load_any(path)
    if not isinstance(m, ModelWeights):
        raise WeightFileError(f"{path}: holds a quantized model, expected float weights")
    return m


def load_quantized(path: str | os.PathLike) -> QuantizedModel:
    m = load_any(path)
    if not isinstance(m, QuantizedModel):
        raise WeightFileError(f"{path}: holds float weights, expected a quantized model")
    return m


# -- manifests ----------------------------------------------------------------


@dataclass
class DatasetManifest:
    pairs: list[tuple[Path, Path]]
    scale: int

    def load(self) -> list[tuple[ImageBuffer, ImageBuffer]]:
        return [(load_png(lr), load_png(hr)) for lr, hr in self.pairs]


def _resolve(entry: str, base: Path) -> Path:
    p = Path(entry)
    if p.is_absolute() or p.exists():
        return p
    return base / p


def load_manifest(path: str | os.PathLike, scale: int) -> DatasetManifest:
    """Read ``lr_path<TAB>hr_path`` lines and check every HR is ``scale`` x its LR.

    Relative entries resolve against the working directory first, then
    against the manifest's own directory.
    """
    base = Path(path).parent
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise ValueError(f"{path}:{lineno}: expected two tab-separated paths")
            pairs.append((_resolve(cols[0], base), _resolve(cols[1], base)))
    if not pairs:
        raise ValueError(f"{path}: manifest lists no image pairs")
    bad = []
    for lr, hr in pairs:
        with Image.open(lr) as a, Image.open(hr) as b:
            (lw, lh), (hw, hh) = a.size, b.size
        if (hw, hh) != (scale * lw, scale * lh):
            bad.append(f"{lr} ({lw}x{lh}) / {hr} ({hw}x{hh})")
    if bad:
        raise ValueError(f"HR size is not {scale}x LR for: " + "; ".join(bad))
    return DatasetManifest(pairs, scale)


def write_manifest(path: str | os.PathLike, pairs: list[tuple[str | os.PathLike, str | os.PathLike]]) -> None:
    with open(path, "w") as fh:
        for lr, hr in pairs:
            fh.write(f"{os.fspath(lr)}\t{os.fspath(hr)}\n")
