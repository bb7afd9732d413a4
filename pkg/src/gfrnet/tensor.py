"""Dense 4-D tensors, precision control, seeded generators and initializers.

Tensors are plain ``numpy.ndarray`` objects laid out row-major in
``(n, c, h, w)`` order. Floating precision is a process-wide switch rather
than a per-array property: float32 for training, float64 for gradient checks.
"""

from __future__ import annotations

import contextlib
import zlib

import numpy as np

_DTYPE = np.float32


def get_dtype():
    return _DTYPE


def set_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}; use float32 or float64")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the working float type (e.g. ``float64`` for gradchecks)."""
    prev = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(prev)


def tensor(data, shape=None) -> np.ndarray:
    """Build a 4-D tensor in the working precision.

    ``data`` may be nested sequences or a flat buffer; when ``shape`` is given
    the flat data is reshaped row-major.
    """
    arr = np.asarray(data, dtype=_DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"data length {arr.size} does not match shape {shape}")
        arr = arr.reshape(shape)
    if arr.ndim != 4:
        raise ValueError(f"expected a 4-D (n, c, h, w) tensor, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=_DTYPE)


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise FloatingPointError(f"{what}: {bad} non-finite element(s)")
    return arr


def elementwise(a: np.ndarray, b: np.ndarray, kind: str = "add") -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if kind == "add":
        out = a + b
    elif kind == "mul":
        out = a * b
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return check_finite(out, f"elementwise {kind}")


# PCG64 (numpy's default bit generator) has a documented, platform-stable
# stream for a given seed; all randomness in the package goes through it.
def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent stream for ``(seed, *keys)``; keys may be ints or strings.

    Strings hash through CRC-32 so the derivation never depends on Python's
    per-process hash randomization.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode("utf-8")) if isinstance(k, str) else int(k))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def xavier_init(fan_in: int, fan_out: int, shape, rng: np.random.Generator) -> np.ndarray:
    """Uniform Xavier/Glorot: samples in [-a, a], a = sqrt(6 / (fan_in + fan_out)).

    Draws exactly ``prod(shape)`` float64 uniforms from ``rng``.
    """
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be >= 1")
    shape = tuple(int(s) for s in shape)
    size = int(np.prod(shape)) if shape else 0
    if size == 0:
        raise ValueError("empty parameter")
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(_DTYPE)
