"""Binary parameter checkpoints.

Layout: magic ``SCPCKPT\\0``, uint32 version, uint32 record count, then per
record sorted by name: uint32 name length, UTF-8 name, uint32 rank, rank x
uint64 dims, little-endian float64 payload.
"""

import os
import struct
import tempfile

import numpy as np

MAGIC = b"SCPCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write(path, data, mode="wb"):
    """Write via a temp file in the target directory, then rename over ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"encoding": "utf-8"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(arrays):
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(blob):
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        size = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(dims).copy()
        pos += 8 * size
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last record")
    return out


def save_module(module, path):
    atomic_write(path, encode({n: p.data for n, p in module.named_parameters()}))


def load_module(module, path):
    """Load parameters in place, checking names and shapes against ``module``."""
    with open(path, "rb") as fh:
        arrays = decode(fh.read())
    params = dict(module.named_parameters())
    if set(arrays) != set(params):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        raise CheckpointError(f"parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape} != model {p.shape}")
        p.data = arrays[name]
    return module
