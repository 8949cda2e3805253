"""Dense NCHW tensors.

A tensor here is a C-contiguous 4-D ``numpy.ndarray`` of float32 or float64
laid out as (batch, channels, rows, cols). The helpers below are the only
structural operations the network needs; they validate shapes and always
return fresh copies.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ShapeError

DTYPES = (np.float32, np.float64)
MAX_ELEMENTS = 2**40


def _check_dtype(dtype) -> np.dtype:
    dtype = np.dtype(dtype)
    if dtype.type not in DTYPES:
        raise TypeError(f"unsupported dtype {dtype}; expected float32 or float64")
    return dtype


def _check_dims(dims: Sequence[int]) -> tuple[int, int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4:
        raise ShapeError(f"expected 4 dims (n, c, h, w), got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"all dims must be >= 1, got {dims}")
    if math.prod(dims) > MAX_ELEMENTS:
        raise ShapeError(f"tensor of dims {dims} exceeds {MAX_ELEMENTS} elements")
    return dims


def check_tensor(x: np.ndarray, name: str = "x") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a 4-D array, got {getattr(x, 'shape', type(x))}")
    _check_dtype(x.dtype)
    return x


def zeros(dims: Sequence[int], dtype=np.float32) -> np.ndarray:
    return np.zeros(_check_dims(dims), dtype=_check_dtype(dtype))


def from_values(dims: Sequence[int], values, dtype=np.float32) -> np.ndarray:
    """Build a tensor from a flat row-major value list.

    Element (n, c, y, x) is ``values[((n*C + c)*H + y)*W + x]``.
    """
    dims = _check_dims(dims)
    flat = np.asarray(values, dtype=_check_dtype(dtype)).ravel()
    if flat.size != math.prod(dims):
        raise ShapeError(f"got {flat.size} values for dims {dims} (need {math.prod(dims)})")
    return flat.reshape(dims).copy()


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


def channel_concat(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_tensor(a, "a")
    check_tensor(b, "b")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"channel_concat: batch/spatial mismatch {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


class ChannelPermutation:
    """Bijection on channel indices; ``map[src] = dst`` (0-based)."""

    def __init__(self, mapping: Sequence[int]):
        arr = np.asarray(mapping, dtype=np.int64).ravel()
        n = arr.size
        if n == 0 or arr.min() < 0 or arr.max() >= n or np.unique(arr).size != n:
            raise ValueError(f"not a bijection on 0..{n - 1}: {list(mapping)}")
        self.map = arr

    def __len__(self) -> int:
        return self.map.size

    def __eq__(self, other) -> bool:
        return isinstance(other, ChannelPermutation) and np.array_equal(self.map, other.map)

    def __repr__(self) -> str:
        return f"ChannelPermutation({self.map.tolist()})"

    def inverse(self) -> "ChannelPermutation":
        inv = np.empty_like(self.map)
        inv[self.map] = np.arange(self.map.size)
        return ChannelPermutation(inv)

    @classmethod
    def identity(cls, n: int) -> "ChannelPermutation":
        return cls(np.arange(n))


def channel_permute(x: np.ndarray, p: ChannelPermutation) -> np.ndarray:
    """Output channel ``p.map[i]`` receives input channel ``i``."""
    check_tensor(x)
    if len(p) != x.shape[1]:
        raise ShapeError(f"permutation of length {len(p)} for {x.shape[1]} channels")
    out = np.empty_like(x)
    out[:, p.map] = x
    return out


def max_abs_diff(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"max_abs_diff: shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ShapeError("max_abs_diff: empty tensors")
    return float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64))))
