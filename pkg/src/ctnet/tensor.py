"""Rank-4 array conventions, blob serialization and the portable RNG.

Every activation, kernel and gradient is a plain ``numpy.ndarray`` of rank 4
in ``(n, c, h, w)`` order, C-contiguous, so element ``(n, c, h, w)`` sits at
flat offset ``((n*C + c)*H + h)*W + w``.  Vectors (biases, batch-norm
statistics) stay rank 1 in memory and are widened to ``(c, 1, 1, 1)`` only
when written as blobs.
"""

from __future__ import annotations

import struct
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, TruncatedError

DEFAULT_DTYPE = np.float32

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class Shape4(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w


def shape4(t: np.ndarray) -> Shape4:
    """Validate that ``t`` is a non-empty rank-4 array and return its shape."""
    if t.ndim != 4:
        raise ConfigError(f"expected a rank-4 (n, c, h, w) tensor, got shape {t.shape}")
    if min(t.shape) < 1:
        raise ConfigError(f"all tensor extents must be >= 1, got {t.shape}")
    return Shape4(*(int(s) for s in t.shape))


def offset(shape: Shape4, n: int, c: int, h: int, w: int) -> int:
    return ((n * shape.c + c) * shape.h + h) * shape.w + w


def flatten(t: np.ndarray) -> np.ndarray:
    """Collapse ``(n, c, h, w)`` to ``(n, c*h*w, 1, 1)`` keeping (c, h, w) order."""
    s = shape4(t)
    return np.ascontiguousarray(t).reshape(s.n, s.c * s.h * s.w, 1, 1)


def unflatten(t: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    return t.reshape(t.shape[0], c, h, w)


def rot180(k: np.ndarray) -> np.ndarray:
    """Reverse every (n, c) plane along both spatial axes."""
    shape4(k)
    return np.ascontiguousarray(k[:, :, ::-1, ::-1])


# --- blob format -----------------------------------------------------------

_EXTENTS = struct.Struct("<4Q")


def as_blob_shape(shape: tuple[int, ...]) -> tuple[int, int, int, int]:
    """Pad a rank 1..4 shape on the right with ones."""
    if not 1 <= len(shape) <= 4:
        raise ConfigError(f"cannot store rank-{len(shape)} array as a tensor blob")
    return tuple(shape) + (1,) * (4 - len(shape))  # type: ignore[return-value]


def to_blob(a: np.ndarray) -> bytes:
    """Four little-endian u64 extents followed by little-endian f32 data."""
    ext = as_blob_shape(a.shape)
    data = np.ascontiguousarray(a, dtype="<f4").tobytes()
    return _EXTENTS.pack(*ext) + data


def from_blob(buf: bytes | memoryview, pos: int = 0) -> tuple[np.ndarray, int]:
    """Decode one blob at ``pos``; returns the (n, c, h, w) array and the end offset."""
    end = pos + _EXTENTS.size
    if end > len(buf):
        raise TruncatedError("tensor blob header runs past end of data")
    ext = _EXTENTS.unpack_from(buf, pos)
    count = ext[0] * ext[1] * ext[2] * ext[3]
    stop = end + 4 * count
    if stop > len(buf):
        raise TruncatedError(f"tensor blob {ext} needs {4 * count} bytes, file is short")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=end).reshape(ext)
    return arr.astype(np.float32), stop


# --- RNG ------------------------------------------------------------------


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z = x & _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


class SeededRng:
    """SplitMix64 generator.

    The state is one 64-bit counter advanced by the golden-ratio constant
    ``0x9E3779B97F4A7C15`` per draw; output ``k`` (1-based) is
    ``mix(seed + k*golden mod 2**64)`` with the standard SplitMix64 finalizer.
    Because the output is a pure function of ``(seed, k)`` a block of draws is
    computed in one vectorized step and the stream is identical on every
    platform.  Floats use the top 53 bits: ``(x >> 11) * 2**-53``.
    """

    def __init__(self, seed: int, counter: int = 0):
        if not 0 <= seed <= _MASK64:
            raise ConfigError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, counter={self.counter})"

    def next_u64(self, size: int | tuple[int, ...] = ()) -> np.ndarray:
        count = int(np.prod(size)) if size != () else 1
        k = np.arange(self.counter + 1, self.counter + 1 + count, dtype=np.uint64)
        self.counter += count
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + k * np.uint64(_GOLDEN)
            out = _mix64(z)
        return out.reshape(size)

    def uniform(self, size: int | tuple[int, ...] = ()) -> np.ndarray:
        """Doubles in [0, 1)."""
        bits = self.next_u64(size) >> np.uint64(11)
        return bits.astype(np.float64) * (1.0 / (1 << 53))

    def integers(self, high: int, size: int | tuple[int, ...] = ()) -> np.ndarray:
        return np.floor(self.uniform(size) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        return np.argsort(self.next_u64(n), kind="stable")

    def spawn(self, key: int) -> "SeededRng":
        """Independent child stream keyed by ``key`` (e.g. an epoch index)."""
        return SeededRng(mix64(self.seed ^ mix64(key + _GOLDEN)))
