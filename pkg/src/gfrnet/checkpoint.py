"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic b"GFRNCKP1"
    u32       length of the config JSON, then that many UTF-8 bytes
    u32       number of entries
    per entry:
      u32     name length, then the UTF-8 name
      u32     ndim, then ndim x u32 dims
      f64[]   row-major data (prod(dims) values)

Entries are the learnable arrays in model order followed by
``<bn>.running_mean`` / ``<bn>.running_var`` for every batch-norm layer.
"""

from __future__ import annotations

import struct

import numpy as np

from .arch import ArchConfig, ModelParams, init_params
from .tensor import get_dtype

MAGIC = b"GFRNCKP1"


class CheckpointError(ValueError):
    pass


def dumps(config: ArchConfig, params: ModelParams) -> bytes:
    cfg = config.to_json().encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(cfg)), cfg]
    items = list(params.state_items())
    parts.append(struct.pack("<I", len(items)))
    for name, arr in items:
        nb = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(buf: bytes):
    """Parse a checkpoint; returns ``(ArchConfig, ModelParams)``.

    Learnable arrays come back in the working precision, running statistics in
    float64.
    """
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"checkpoint truncated at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(8) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (clen,) = struct.unpack("<I", take(4))
    config = ArchConfig.from_json(take(clen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        entries[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last entry")

    params = init_params(config, seed=0)
    dt = get_dtype()
    for name, ref in params.arrays.items():
        arr = entries.pop(name, None)
        if arr is None or arr.shape != ref.shape:
            raise CheckpointError(f"entry {name!r} missing or mis-shaped")
        params.arrays[name] = arr.astype(dt)
    for bn, st in params.bn.items():
        try:
            st.running_mean = entries.pop(f"{bn}.running_mean")
            st.running_var = entries.pop(f"{bn}.running_var")
        except KeyError as e:
            raise CheckpointError(f"missing batch-norm statistics {e}") from None
    if entries:
        raise CheckpointError(f"unexpected entries: {sorted(entries)}")
    return config, params


def save(path, config: ArchConfig, params: ModelParams):
    with open(path, "wb") as f:
        f.write(dumps(config, params))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())


__all__ = ["MAGIC", "CheckpointError", "dumps", "loads", "save", "load"]
