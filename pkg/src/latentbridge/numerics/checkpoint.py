"""Binary checkpoint container shared by all trainable modules.

Layout: magic "R2I1", u32 tensor count, then per tensor: u16 name length,
UTF-8 name, u8 rank, rank x u64 dims, raw 32-bit little-endian float data.
All integers little-endian, no compression. Tensors are written sorted by
name so identical contents produce identical bytes.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .tensor import ShapeError, Tensor

__all__ = ["MAGIC", "save_checkpoint", "load_checkpoint", "sha256_file"]

MAGIC = b"R2I1"


class CheckpointError(ValueError):
    """Malformed checkpoint container."""


def save_checkpoint(path, tensors: dict[str, "np.ndarray | Tensor"]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name]
        if isinstance(arr, Tensor):
            arr = arr.data
        arr = np.asarray(arr, dtype="<f4", order="C")  # keeps rank-0 arrays rank 0
        if arr.ndim > 255:
            raise ShapeError(f"checkpoint: rank {arr.ndim} > 255 for {name}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"checkpoint: name too long ({len(encoded)} bytes)")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    off = 4
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}Q", raw, off)
        off += 8 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        out[name] = arr.astype(np.float32, copy=True)
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return out


def sha256_file(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()
