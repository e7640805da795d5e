"""Weight checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"DNASCKPT"
    version    uint32    1
    count      uint32    number of tensors
    repeated count times:
        name_len  uint16
        name      name_len bytes, UTF-8
        dtype     uint8     1 = float32, 2 = float64
        ndim      uint8
        dims      ndim x uint32
        values    prod(dims) little-endian floats, C order
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DNASCKPT"
VERSION = 1
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def save_weights(path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def load_weights(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a weight checkpoint")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dtype = _DTYPES[code]
        size = int(np.prod(dims)) * dtype.itemsize
        arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=pos).reshape(dims)
        out[name] = arr.astype(dtype.newbyteorder("="), copy=True)
        pos += size
    return out


def state_dict(module) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in module.named_parameters()}


def load_state_dict(module, weights: Mapping[str, np.ndarray]) -> None:
    params = dict(module.named_parameters())
    missing = sorted(set(params) - set(weights))
    if missing:
        raise KeyError(f"checkpoint lacks tensors: {missing[:5]}")
    for name, p in params.items():
        arr = weights[name]
        if arr.shape != p.shape:
            raise ValueError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
        p.data = arr.astype(p.dtype, copy=True)
