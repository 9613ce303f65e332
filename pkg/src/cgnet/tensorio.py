"""Flat named-tensor archive format.

One binary file holds a flat map of names to float32 tensors. The same
encoding backs the backbone weight archive and training checkpoints.

Layout (all integers little-endian uint32, all data little-endian float32):

    magic   b"CGTA"
    version uint32 (currently 1)
    count   uint32
    entry*  name_len uint32 | name utf-8 | ndim uint32 | dims uint32* | data f32*
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import IngestionError

MAGIC = b"CGTA"
VERSION = 1


def save_tensor_archive(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write a name -> tensor map; values are cast to little-endian float32."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, value in tensors.items():
            arr = np.ascontiguousarray(np.asarray(value), dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_tensor_archive(path: str | Path) -> dict[str, np.ndarray]:
    """Read a tensor archive back into a name -> float32 ndarray map."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read tensor archive {path}: {exc}") from exc

    if raw[:4] != MAGIC:
        raise IngestionError(f"{path} is not a tensor archive (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise IngestionError(f"{path}: unsupported archive version {version}")

    tensors: dict[str, np.ndarray] = {}
    offset = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f4", count=size, offset=offset)
        offset += 4 * size
        tensors[name] = data.reshape(shape).copy()
    if offset != len(raw):
        raise IngestionError(f"{path}: trailing bytes after {count} entries")
    return tensors
