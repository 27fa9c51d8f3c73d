"""DEESCO01 checkpoint container: named float64 tensors, little-endian.

Layout::

    b"DEESCO01"
    u64 entry count
    per entry: u64 name length, UTF-8 name, u64 rank, rank x u64 extents,
               prod(extents) x f64 values
"""

import struct

import numpy as np

MAGIC = b"DEESCO01"


class CheckpointError(ValueError):
    pass


def dumps(tensors):
    parts = [MAGIC, struct.pack("<Q", len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(buf):
    if buf[:8] != MAGIC:
        raise CheckpointError("not a DEESCO01 checkpoint (bad magic)")
    pos = 8

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError("checkpoint is truncated")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (count,) = read("<Q")
    out = {}
    for _ in range(count):
        (nlen,) = read("<Q")
        if pos + nlen > len(buf):
            raise CheckpointError("checkpoint is truncated")
        name = bytes(buf[pos : pos + nlen]).decode("utf-8")
        pos += nlen
        (rank,) = read("<Q")
        shape = read(f"<{rank}Q") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        if pos + 8 * n > len(buf):
            raise CheckpointError(f"checkpoint is truncated inside {name!r}")
        values = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64)
        pos += 8 * n
        if name in out:
            raise CheckpointError(f"duplicate entry {name!r}")
        out[name] = values.reshape(shape)
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last checkpoint entry")
    return out


def save(path, tensors):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
