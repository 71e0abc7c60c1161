"""Binary checkpoint format for named float32 arrays plus a text block.

Layout (all integers uint32 little-endian)::

    b"CGD1" | version | entry count
    per entry: name length | name (utf-8) | rank | dims... | float32 LE data
    text length | text (utf-8)
"""
from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"CGD1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, text: str = "") -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            a = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)) + nb)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())
        tb = text.encode("utf-8")
        fh.write(struct.pack("<I", len(tb)) + tb)


def load_checkpoint(path) -> tuple:
    """Returns (OrderedDict name -> float32 array, text)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    arrays = OrderedDict()
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * n > len(buf):
                raise CheckpointError(f"{path}: truncated entry {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(dims)
            pos += 4 * n
        (tlen,) = struct.unpack_from("<I", buf, pos)
        if pos + 4 + tlen != len(buf):
            raise CheckpointError(f"{path}: text block length {tlen} does not match the file size")
        text = buf[pos + 4:].decode("utf-8")
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return arrays, text
