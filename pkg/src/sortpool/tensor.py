"""Dense float64 tensors backed by numpy.

Tensors are plain ``numpy.ndarray`` objects with dtype float64 in row-major
(C) order; image batches use the (batch, channel, height, width) convention.
The helpers here add the shape validation the rest of the package relies on,
plus the valid-window machinery shared by pooling and convolution.
"""
from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
INDEX_DTYPE = np.int64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: extents must be >= 1")
    return shape


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=DTYPE)


def full(shape: Sequence[int], value: float) -> np.ndarray:
    return np.full(_check_shape(shape), value, dtype=DTYPE)


def from_values(shape: Sequence[int], values) -> np.ndarray:
    shape = _check_shape(shape)
    data = np.asarray(values, dtype=DTYPE).ravel()
    if data.size != int(np.prod(shape)):
        raise ShapeError(f"{data.size} values cannot fill shape {shape}")
    return data.reshape(shape).copy()


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "add")
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "sub")
    return a - b


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "mul")
    return a * b


def scale(a: np.ndarray, s: float) -> np.ndarray:
    return a * DTYPE(s)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return a @ b


def total(t: np.ndarray) -> float:
    """Sum of all elements."""
    return float(np.sum(t))


def argmax_along_last(t: np.ndarray) -> np.ndarray:
    # np.argmax returns the first occurrence on ties
    return np.argmax(t, axis=-1).astype(INDEX_DTYPE)


def output_extent(size: int, kernel: int, stride: int) -> int:
    """Number of valid windows along one axis; raises if none fit."""
    if kernel < 1 or stride < 1:
        raise ShapeError(f"kernel {kernel} and stride {stride} must be positive")
    if size < kernel:
        raise ShapeError(f"kernel {kernel} larger than input extent {size}")
    return (size - kernel) // stride + 1


def window_view(x: np.ndarray, kernel: tuple[int, int], stride: tuple[int, int]) -> np.ndarray:
    """Read-only strided view of all valid windows over the last two axes.

    For ``x`` of shape (..., H, W) returns shape (..., outH, outW, kh, kw).
    """
    kh, kw = kernel
    sh, sw = stride
    output_extent(x.shape[-2], kh, sh)
    output_extent(x.shape[-1], kw, sw)
    view = sliding_window_view(x, (kh, kw), axis=(-2, -1))
    return view[..., ::sh, ::sw, :, :]


def window_iter(
    t: np.ndarray, kernel: tuple[int, int], stride: tuple[int, int]
) -> Iterator[tuple[int, int, np.ndarray, np.ndarray]]:
    """Yield ``(out_row, out_col, values, linear_indices)`` for each valid window.

    Works on the trailing (H, W) plane of a 2-D tensor; values and indices are
    flattened in row-major window order.
    """
    if t.ndim != 2:
        raise ShapeError(f"window_iter expects a 2-D plane, got shape {t.shape}")
    kh, kw = kernel
    sh, sw = stride
    H, W = t.shape
    oh = output_extent(H, kh, sh)
    ow = output_extent(W, kw, sw)
    flat = t.ravel()
    rows = np.arange(kh)[:, None] * W
    cols = np.arange(kw)[None, :]
    offsets = (rows + cols).ravel()
    for i in range(oh):
        for j in range(ow):
            idx = (i * sh * W + j * sw + offsets).astype(INDEX_DTYPE)
            yield i, j, flat[idx].copy(), idx
