"""Central finite-difference oracle for checking backward passes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import DTYPE, ShapeError

DEFAULT_H = 1e-6
REL_FLOOR = 1e-8


@dataclass
class GradReport:
    max_relative_error: float
    worst_coordinate: tuple[int, ...]
    analytic: float
    numeric: float

    def __str__(self):
        return (
            f"max rel err {self.max_relative_error:.3e} at {self.worst_coordinate} "
            f"(analytic {self.analytic:.10g}, numeric {self.numeric:.10g})"
        )


def finite_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = DEFAULT_H) -> np.ndarray:
    """Numeric gradient of scalar ``f`` at ``x`` by central differences.

    ``x`` is perturbed in place one coordinate at a time and restored, so
    callers may pass a live parameter array and ``f`` may read it by closure.
    """
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    grad = np.zeros(x.shape, dtype=DTYPE)
    flat = x.reshape(-1)
    if not np.shares_memory(flat, x):
        raise ValueError("finite_diff needs a contiguous array it can perturb in place")
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad


def compare(analytic: np.ndarray, numeric: np.ndarray) -> GradReport:
    analytic = np.asarray(analytic, dtype=DTYPE)
    numeric = np.asarray(numeric, dtype=DTYPE)
    if analytic.shape != numeric.shape:
        raise ShapeError(f"compare: shape mismatch {analytic.shape} vs {numeric.shape}")
    rel = np.abs(analytic - numeric) / np.maximum(REL_FLOOR, np.abs(analytic) + np.abs(numeric))
    if not rel.size:
        return GradReport(0.0, (), 0.0, 0.0)
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
    return GradReport(float(rel[worst]), tuple(int(i) for i in worst),
                      float(analytic[worst]), float(numeric[worst]))


def tie_free(rng: np.random.Generator, shape, spread: float = 1.0, min_gap: float = 1e-5) -> np.ndarray:
    """Random values plus distinct offsets i * 1e-4, so no two entries tie.

    Offsets follow a random permutation so rank is not tied to position. Any
    pair still closer than ``min_gap`` is pushed apart in sorted order, which
    keeps a central-difference probe from reordering entries.
    """
    n = int(np.prod(shape))
    x = rng.uniform(-spread, spread, size=n) + rng.permutation(n) * 1e-4
    order = np.argsort(x)
    s = x[order]
    for i in range(1, n):
        if s[i] - s[i - 1] < min_gap:
            s[i] = s[i - 1] + min_gap
    x[order] = s
    return x.reshape(shape)
