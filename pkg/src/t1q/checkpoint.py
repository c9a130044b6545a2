"""Binary container for named tensors.

Layout (little-endian)::

    magic       8 bytes   b"T1QCKPT\\0"
    version     u32       1
    meta_len    u32       length of the UTF-8 JSON metadata blob
    meta        bytes
    count       u32       number of tensors
    per tensor:
        name_len u16, name (UTF-8)
        dtype_len u8, dtype string (numpy ``str``, e.g. "<f8")
        ndim u8, ndim x u64 shape
        payload: C-order bytes, exactly prod(shape) * itemsize
"""
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"T1QCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors, metadata=None):
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        key = name.encode()
        dt = arr.dtype.str.encode()
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<B", len(dt)) + dt)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(out))


def load_tensors(path):
    """Return ``(tensors, metadata)``."""
    raw = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(8, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a t1q checkpoint")
    version, meta_len = struct.unpack("<II", take(8, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    metadata = json.loads(take(meta_len, "metadata").decode())
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode()
        (dlen,) = struct.unpack("<B", take(1, "dtype length"))
        dtype = np.dtype(take(dlen, "dtype").decode())
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim, "shape"))
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(take(nbytes, f"payload of {name}"), dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after the last tensor")
    return tensors, metadata
