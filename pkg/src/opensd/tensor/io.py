"""Checkpoint files: ``OSD1`` magic, then per entry name length, name, rank, dims, float64 LE values."""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"OSD1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors):
    with open(path, "wb") as fh:
        fh.write(dump_checkpoint(tensors))


def dump_checkpoint(tensors):
    parts = [MAGIC]
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype="<f8", order="C")
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)))
        parts.append(key)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def parse_checkpoint(blob):
    if blob[:4] != MAGIC:
        raise CheckpointError("not an OSD1 checkpoint (bad magic)")
    pos = 4
    try:
        out = {}
        while pos < len(blob):
            (klen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + klen].decode("utf-8")
            pos += klen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(dims)
            pos += 8 * n
            if pos > len(blob):
                raise ValueError("entry runs past end of file")
            if name in out:
                raise ValueError(f"duplicate entry {name!r}")
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc
    return out
