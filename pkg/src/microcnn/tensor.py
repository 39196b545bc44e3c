"""Dense float32 arrays and the handful of numeric kernels the layers use.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float32.
Shapes are row-major, outermost dimension first; images are ``[H, W, C]``
and batches ``[N, H, W, C]``.

The random generator is SplitMix64 (Steele, Lea & Flood, 2014), evaluated
in vectorised form so that large draws stay cheap.  Every output depends
only on the seed and the number of values drawn before it, so streams are
bit-identical on every platform.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32

_INDEX_MAX = np.iinfo(np.intp).max


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


# --------------------------------------------------------------------------
# shapes
# --------------------------------------------------------------------------

def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not dims:
        raise ShapeError("shape must have at least one dimension")
    if any(d < 1 for d in dims):
        raise ShapeError(f"every dimension must be >= 1, got {dims}")
    if math.prod(dims) > _INDEX_MAX:
        raise OverflowError(f"element count of shape {dims} overflows the index type")
    return dims


def strides(shape: Sequence[int]) -> tuple[int, ...]:
    """Row-major element strides (not byte strides) for ``shape``."""
    out = []
    step = 1
    for d in reversed(tuple(shape)):
        out.append(step)
        step *= d
    return tuple(reversed(out))


def offset(shape: Sequence[int], index: Sequence[int]) -> int:
    """Flat offset of a multi-index into row-major data."""
    if len(index) != len(shape):
        raise ShapeError(f"index {tuple(index)} has wrong rank for shape {tuple(shape)}")
    for i, d in zip(index, shape):
        if not 0 <= i < d:
            raise IndexError(f"index {tuple(index)} out of range for shape {tuple(shape)}")
    return sum(i * s for i, s in zip(index, strides(shape)))


def tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=DTYPE)
    if shape is not None:
        arr = arr.reshape(check_shape(shape))
    return arr


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(check_shape(shape), dtype=DTYPE)


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a[m, k] @ b[k, n]`` accumulated by BLAS in float32."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a, b, dtype=DTYPE)


_BINARY: dict[str, Callable] = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op: str, a: np.ndarray, b=None) -> np.ndarray:
    """Pointwise ``add``/``sub``/``mul`` of equal shapes, ``scale`` by a scalar,
    or ``map`` of a unary callable."""
    if op in _BINARY:
        if np.isscalar(b):
            return _BINARY[op](a, DTYPE(b)).astype(DTYPE, copy=False)
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        return _BINARY[op](a, b).astype(DTYPE, copy=False)
    if op == "scale":
        if not np.isscalar(b):
            raise TypeError("scale expects a scalar factor")
        return (a * DTYPE(b)).astype(DTYPE, copy=False)
    if op == "map":
        return np.asarray(b(a), dtype=DTYPE)
    raise ValueError(f"unknown elementwise op {op!r}")


def reduce(t: np.ndarray, op: str, axis: int | None = None) -> np.ndarray:
    """Reduce along ``axis`` (or every axis when ``None``).

    Sums and means accumulate in float64.  ``argmax`` picks the lowest index
    among ties.
    """
    if axis is not None and not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {t.ndim}")
    if op == "sum":
        return np.asarray(t.sum(axis=axis, dtype=np.float64), dtype=DTYPE)
    if op == "mean":
        return np.asarray(t.mean(axis=axis, dtype=np.float64), dtype=DTYPE)
    if op == "max":
        return np.asarray(t.max(axis=axis), dtype=DTYPE)
    if op == "argmax":
        # numpy returns the first occurrence, which is the tie rule we want
        return np.argmax(t, axis=axis)
    raise ValueError(f"unknown reduction {op!r}")


# --------------------------------------------------------------------------
# random numbers
# --------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64 generator.

    The state is a 64-bit counter advanced by the golden-ratio increment
    ``0x9E3779B97F4A7C15``; each output is the finaliser applied to the
    new counter value.  Draws of ``n`` values are computed at once from
    ``state + k * increment`` for ``k = 1..n``.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK64
        self.state = self.seed

    def next_u64(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            k = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + k * _GOLDEN
            out = _mix(z)
        self.state = (self.state + n * int(_GOLDEN)) & _MASK64
        return out

    def _bits24(self, n: int) -> np.ndarray:
        # each 64-bit draw yields two 24-bit integers: bits 63..40, then 39..16
        words = self.next_u64((n + 1) // 2)
        out = np.empty((len(words), 2), dtype=np.uint32)
        out[:, 0] = words >> np.uint64(40)
        out[:, 1] = (words >> np.uint64(16)) & np.uint64(0xFFFFFF)
        return out.reshape(-1)[:n]

    def random(self, shape: Sequence[int]) -> np.ndarray:
        """Uniform float32 on the grid ``k / 2**24`` in [0, 1)."""
        dims = check_shape(shape)
        bits = self._bits24(math.prod(dims))
        return (bits.astype(DTYPE) * DTYPE(2.0 ** -24)).reshape(dims)

    def uniform(self, shape: Sequence[int], lo: float, hi: float) -> np.ndarray:
        if not lo < hi:
            raise ValueError(f"uniform needs lo < hi, got lo={lo}, hi={hi}")
        dims = check_shape(shape)
        u = self._bits24(math.prod(dims)).astype(np.float64) * 2.0 ** -24
        out = (lo + (hi - lo) * u).astype(DTYPE)
        # float32 rounding may land on hi itself
        top = np.nextafter(DTYPE(hi), DTYPE(lo))
        np.minimum(out, top, out=out)
        return out.reshape(dims)

    def permutation(self, n: int) -> np.ndarray:
        if n == 0:
            return np.zeros(0, dtype=np.intp)
        return np.argsort(self.next_u64(n), kind="stable")

    def spawn(self) -> "Rng":
        """Independent child generator seeded from this stream."""
        return Rng(int(self.next_u64(1)[0]))


def rng_uniform(rng: Rng, shape: Sequence[int], lo: float, hi: float) -> np.ndarray:
    return rng.uniform(shape, lo, hi)
