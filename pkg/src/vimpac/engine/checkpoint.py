"""Parameter checkpoint file ("VPRM")."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VPRM"


class CheckpointFormatError(ValueError):
    pass


def encode_params(arrays):
    """``arrays`` maps names to float arrays; entries are written sorted by name."""
    parts = [MAGIC]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_params(data: bytes):
    if data[:4] != MAGIC:
        raise CheckpointFormatError("bad magic, expected b'VPRM' (at byte offset 0)")
    pos, out = 4, {}

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointFormatError(f"truncated checkpoint (at byte offset {pos})")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return out


def save_params(path, arrays):
    Path(path).write_bytes(encode_params(arrays))


def load_params(path):
    return decode_params(Path(path).read_bytes())
