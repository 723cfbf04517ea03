"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"SGSK"                      magic
    u32 version                  currently 1
    repeated until end of file:
        u32 name_length
        name_length bytes        UTF-8 name
        4 x u32 shape            right-padded with 1s for tensors of rank < 4
        prod(shape) x f32        row-major data

Rank-0 and rank-1 tensors are stored with the padded shape; the caller
reshapes on load because it knows the shape it expects.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SGSK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _shape4(shape: tuple[int, ...]) -> tuple[int, int, int, int]:
    if len(shape) > 4:
        raise CheckpointError(f"tensors of rank {len(shape)} cannot be stored")
    return tuple(shape) + (1,) * (4 - len(shape))


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    """Write ``tensors`` in insertion order; the file is replaced atomically."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    names = set()
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in tensors.items():
            if name in names:
                raise CheckpointError(f"duplicate record {name!r}")
            names.add(name)
            arr = np.asarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<4I", *_shape4(arr.shape)))
            fh.write(np.ascontiguousarray(arr).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Read every record; shapes come back as the stored 4-tuples."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 8
    while pos < len(blob):
        try:
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            shape = struct.unpack_from("<4I", blob, pos)
            pos += 16
            count = int(np.prod(shape))
            data = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{path}: truncated or corrupt record at byte {pos}") from exc
        pos += 4 * count
        out[name] = data.reshape(shape).astype(np.float32)
    return out
