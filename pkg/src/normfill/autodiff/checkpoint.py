"""Binary parameter checkpoints.

Layout (little-endian): ``b"NFCK"``, version u32, count u32, then per tensor:
name length u32, UTF-8 name, rank u32, dims u32 * rank, float32 payload.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

MAGIC = b"NFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> Dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic, not a checkpoint file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    out: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off: off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if off != len(blob):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save(path, arrays: Mapping[str, np.ndarray]) -> Path:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(encode(arrays))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load(path) -> Dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(blob)
