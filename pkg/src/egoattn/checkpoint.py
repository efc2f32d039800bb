"""Parameter checkpoint serialization.

Byte layout (all integers unsigned 32-bit little-endian, floats IEEE-754
64-bit little-endian):

    magic: 8 bytes, ASCII "EGOATTN1"
    then one record per parameter, in save order:
        name_len: u32
        name:     name_len bytes, UTF-8
        rank:     u32
        dims:     rank * u32
        data:     prod(dims) * f64, row-major

Round-trips are bit-exact.
"""

import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"EGOATTN1"


class CheckpointError(IOError):
    pass


def save_checkpoint(path, params):
    """Write an ordered mapping of name -> Tensor to ``path``."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, t in params.items():
            data = np.ascontiguousarray(t.data, dtype="<f8")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path):
    """Read a checkpoint into an ordered dict of name -> numpy array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}")
    out = {}
    off = 8
    try:
        while off < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
            off += 8 * count
            out[name] = arr.reshape(dims).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return out


def restore_into(params, loaded, path="<checkpoint>"):
    """Copy loaded arrays into an existing name -> Tensor mapping."""
    for name, t in params.items():
        if name not in loaded:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        arr = loaded[name]
        if arr.shape != t.data.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {arr.shape}, "
                f"model expects {t.data.shape}"
            )
        t.data[...] = arr
    extra = set(loaded) - set(params)
    if extra:
        raise CheckpointError(f"{path}: unexpected parameters {sorted(extra)}")
