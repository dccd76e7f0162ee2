"""Flat binary checkpoint format for named float32 tensors.

Layout (all little-endian):
    magic "GDCK" | version u32 | count u32 |
    per tensor: name_len u32, name utf-8, rank u32, dims u32[rank], f32 data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..exceptions import CheckpointError
from .tensor import DTYPE, Tensor

MAGIC = b"GDCK"
VERSION = 1


def save_checkpoint(path, tensors: dict) -> None:
    """Write ``{name: Tensor | ndarray}`` to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, t in tensors.items():
            data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=DTYPE)
            data = np.ascontiguousarray(data, dtype=DTYPE)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.astype("<f4").tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint back as ``{name: float32 ndarray}``."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    off = 4
    try:
        version, count = struct.unpack_from("<II", blob, off)
        off += 8
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if off + 4 * n > len(blob):
                raise CheckpointError(
                    f"{path}: truncated data for tensor {name!r} "
                    f"(need {4 * n} bytes, have {len(blob) - off})"
                )
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
            off += 4 * n
            out[name] = arr.reshape(dims).astype(DTYPE)
        return out
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated checkpoint ({e})") from e


def checkpoint_digest(path) -> str:
    """Content hash, used by tests and caches to detect mutation."""
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
