"""Max, average, kth-max and learnable sorted pooling with exact backward passes.

All operators work on (batch, channel, height, width) float64 arrays over
valid windows only. Window elements are ranked by a stable descending sort,
so equal values are ordered by lowest linear index. ``k`` and ``K`` are
1-indexed: ``k = 1`` selects the window maximum.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import DTYPE, INDEX_DTYPE, ShapeError, output_extent

MODES = ("max", "avg", "kth", "sorted")


class PoolConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PoolConfig:
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (2, 2)
    mode: str = "max"
    # k for kth-max, K for sorted pooling; ignored for max/avg
    k: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(v) for v in self.kernel))
        object.__setattr__(self, "stride", tuple(int(v) for v in self.stride))
        if len(self.kernel) != 2 or min(self.kernel) < 1:
            raise PoolConfigError(f"kernel must be two positive extents, got {self.kernel}")
        if len(self.stride) != 2 or min(self.stride) < 1:
            raise PoolConfigError(f"stride must be two positive extents, got {self.stride}")
        if self.mode not in MODES:
            raise PoolConfigError(f"unknown pooling mode {self.mode!r}, expected one of {MODES}")
        if self.mode in ("kth", "sorted") and not 1 <= self.k <= self.window_size:
            raise PoolConfigError(
                f"{self.mode} pooling needs 1 <= k <= {self.window_size}, got k={self.k}"
            )

    @property
    def window_size(self) -> int:
        return self.kernel[0] * self.kernel[1]

    @property
    def selected(self) -> int:
        """Number of ranked elements each window keeps in ``PoolSaved``."""
        return self.k if self.mode == "sorted" else 1

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return (
            output_extent(h, self.kernel[0], self.stride[0]),
            output_extent(w, self.kernel[1], self.stride[1]),
        )

    def with_kernel(self, kernel, stride=None) -> "PoolConfig":
        return PoolConfig(kernel, self.stride if stride is None else stride, self.mode, self.k)

    @classmethod
    def max(cls, kernel=(3, 3), stride=(2, 2)):
        return cls(kernel, stride, "max", 1)

    @classmethod
    def avg(cls, kernel=(3, 3), stride=(2, 2)):
        return cls(kernel, stride, "avg", 1)

    @classmethod
    def kth_max(cls, k: int, kernel=(3, 3), stride=(2, 2)):
        return cls(kernel, stride, "kth", k)

    @classmethod
    def sorted(cls, K: int, kernel=(3, 3), stride=(2, 2)):
        return cls(kernel, stride, "sorted", K)

    def label(self) -> str:
        if self.mode == "kth":
            return f"kth{self.k}"
        if self.mode == "sorted":
            return f"sorted{self.k}"
        return self.mode


@dataclass
class SortedPoolParams:
    """Raw (pre-softmax) weights, one row of length K per channel."""

    raw_weights: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.raw_weights = np.asarray(self.raw_weights, dtype=DTYPE)
        if self.raw_weights.ndim != 2:
            raise ShapeError(f"raw weights must be (channels, K), got {self.raw_weights.shape}")
        if not np.all(np.isfinite(self.raw_weights)):
            raise ValueError("raw weights must be finite")
        if self.grad is None:
            self.grad = np.zeros_like(self.raw_weights)
        elif self.grad.shape != self.raw_weights.shape:
            raise ShapeError(
                f"grad shape {self.grad.shape} does not match weights {self.raw_weights.shape}"
            )

    @property
    def channels(self) -> int:
        return self.raw_weights.shape[0]

    @property
    def K(self) -> int:
        return self.raw_weights.shape[1]

    def normalized(self) -> np.ndarray:
        return softmax_normalize(self.raw_weights)


@dataclass
class PoolSaved:
    input_shape: tuple[int, ...]
    # linear indices into the input, descending value order along the last axis
    top_indices: np.ndarray
    sorted_values: Optional[np.ndarray] = None
    normalized_weights: Optional[np.ndarray] = None
    output: Optional[np.ndarray] = None


def softmax_normalize(raw: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with max-shift for stability."""
    raw = np.asarray(raw, dtype=DTYPE)
    if np.isnan(raw).any():
        raise ValueError("softmax_normalize: NaN in raw weights")
    shifted = raw - raw.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_jacobian(weights: np.ndarray) -> np.ndarray:
    """d W_j / d w*_k = W_j (delta_jk - W_k) for one normalized row."""
    w = np.asarray(weights, dtype=DTYPE)
    return np.diag(w) - np.outer(w, w)


def init_weights(channels: int, K: int, scheme: str = "uniform", rate: float = 1.0) -> SortedPoolParams:
    """Initial raw weights for a sorted pooling layer.

    ``uniform`` sets every raw weight to zero so all normalized weights are
    equal. ``expdecay`` sets ``w*_k = -rate * (k - 1)``, giving normalized
    weights that shrink by a factor ``exp(-rate)`` per rank.
    """
    if channels < 1 or K < 1:
        raise ValueError(f"channels and K must be >= 1, got {channels}, {K}")
    if scheme == "uniform":
        raw = np.zeros((channels, K), dtype=DTYPE)
    elif scheme == "expdecay":
        if not rate > 0:
            raise ValueError(f"expdecay rate must be positive, got {rate}")
        row = -rate * np.arange(K, dtype=DTYPE)
        raw = np.tile(row, (channels, 1))
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return SortedPoolParams(raw)


def _windows(x: np.ndarray, cfg: PoolConfig) -> np.ndarray:
    """Window values laid out position-first: (kh*kw, B, C, outH, outW).

    Position p = r * kw + s is row-major within the window, so a lower
    position always means a lower linear index in the input.
    """
    if x.ndim != 4:
        raise ShapeError(f"pooling expects a 4-D (B, C, H, W) input, got shape {x.shape}")
    kh, kw = cfg.kernel
    sh, sw = cfg.stride
    oh, ow = cfg.output_hw(*x.shape[2:])
    vals = np.empty((kh * kw, x.shape[0], x.shape[1], oh, ow), dtype=DTYPE)
    for r in range(kh):
        for c in range(kw):
            vals[r * kw + c] = x[:, :, r:r + sh * (oh - 1) + 1:sh, c:c + sw * (ow - 1) + 1:sw]
    return vals


def _linear_indices(input_shape, cfg: PoolConfig, positions: np.ndarray) -> np.ndarray:
    """Map within-window positions (m, B, C, outH, outW) to linear input indices."""
    B, C, H, W = input_shape
    kw = cfg.kernel[1]
    sh, sw = cfg.stride
    oh, ow = positions.shape[3:5]
    plane = (np.arange(oh) * sh * W)[:, None] + (np.arange(ow) * sw)[None, :]
    base = (np.arange(B * C, dtype=INDEX_DTYPE) * (H * W)).reshape(B, C, 1, 1) + plane
    return base[None] + (positions // kw) * W + positions % kw


def _top(vals: np.ndarray, keep: int) -> tuple[np.ndarray, np.ndarray]:
    """Positions and values of the ``keep`` largest entries per window, descending.

    Each round is a running argmax with a strict comparison, so among equal
    values the lowest position wins; the winner is then masked out. This is
    the order a stable descending sort would give.
    """
    n = vals.shape[0]
    work = vals.copy() if keep > 1 else vals
    flat = work.reshape(n, -1)
    cols = np.arange(flat.shape[1])
    small = np.int8 if n <= 127 else np.int32
    positions, values = [], []
    for r in range(keep):
        best = flat[0].copy()
        pos = np.zeros(flat.shape[1], dtype=small)
        for p in range(1, n):
            # branch-free select; boolean-mask assignment is far slower here
            better = (flat[p] > best).view(np.int8)
            pos += better * (small(p) - pos) if small is np.int8 else better.astype(small) * (p - pos)
            np.maximum(best, flat[p], out=best)
        positions.append(pos.astype(INDEX_DTYPE))
        values.append(best)
        if r + 1 < keep:
            flat[positions[-1], cols] = -np.inf
    shape = (keep,) + vals.shape[1:]
    return np.stack(positions).reshape(shape), np.stack(values).reshape(shape)


def _last(a: np.ndarray) -> np.ndarray:
    return np.moveaxis(a, 0, -1)


def _scatter(indices: np.ndarray, contrib: np.ndarray, shape) -> np.ndarray:
    size = int(np.prod(shape))
    out = np.bincount(indices.ravel(), weights=contrib.ravel(), minlength=size)
    return out.reshape(shape)


def _check_grad_out(grad_out: np.ndarray, saved: PoolSaved) -> None:
    expected = saved.top_indices.shape[:4]
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output {expected}")


def kth_max_forward(x: np.ndarray, cfg: PoolConfig) -> tuple[np.ndarray, PoolSaved]:
    if cfg.mode not in ("kth", "max"):
        raise PoolConfigError(f"kth_max_forward needs a kth/max config, got {cfg.mode}")
    k = cfg.k if cfg.mode == "kth" else 1
    pos, top_vals = _top(_windows(x, cfg), k)
    idx = _linear_indices(x.shape, cfg, pos[k - 1:k])
    return top_vals[k - 1], PoolSaved(x.shape, _last(idx))


def kth_max_backward(grad_out: np.ndarray, saved: PoolSaved, input_shape=None) -> np.ndarray:
    _check_grad_out(grad_out, saved)
    shape = saved.input_shape if input_shape is None else tuple(input_shape)
    return _scatter(saved.top_indices, grad_out[..., None], shape)


def max_pool(x: np.ndarray, cfg: PoolConfig) -> tuple[np.ndarray, PoolSaved]:
    return kth_max_forward(x, PoolConfig(cfg.kernel, cfg.stride, "max", 1))


max_pool_backward = kth_max_backward


def avg_pool(x: np.ndarray, cfg: PoolConfig) -> tuple[np.ndarray, PoolSaved]:
    vals = _windows(x, cfg)
    pos = np.arange(cfg.window_size).reshape(-1, 1, 1, 1, 1)
    idx = _linear_indices(x.shape, cfg, np.broadcast_to(pos, vals.shape))
    return vals.mean(axis=0), PoolSaved(x.shape, _last(idx))


def avg_pool_backward(grad_out: np.ndarray, saved: PoolSaved, input_shape=None) -> np.ndarray:
    _check_grad_out(grad_out, saved)
    shape = saved.input_shape if input_shape is None else tuple(input_shape)
    n = saved.top_indices.shape[-1]
    contrib = np.broadcast_to(grad_out[..., None] / n, saved.top_indices.shape)
    return _scatter(saved.top_indices, contrib, shape)


def sorted_pool_forward(
    x: np.ndarray, params: SortedPoolParams, cfg: PoolConfig
) -> tuple[np.ndarray, PoolSaved]:
    """Per window: sum over k <= K of W_k times the k-th largest value."""
    if cfg.mode != "sorted":
        raise PoolConfigError(f"sorted_pool_forward needs a sorted config, got {cfg.mode}")
    K = cfg.k
    if x.ndim == 4 and params.channels != x.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels but params have {params.channels} rows")
    if params.K != K:
        raise ShapeError(f"params have K={params.K} but config asks for K={K}")
    pos, top_vals = _top(_windows(x, cfg), K)
    top_idx = _linear_indices(x.shape, cfg, pos)
    W = params.normalized()
    out = np.einsum("kbchw,ck->bchw", top_vals, W)
    return out, PoolSaved(x.shape, _last(top_idx), _last(top_vals), W, out)


def sorted_pool_backward(
    grad_out: np.ndarray, saved: PoolSaved, params: SortedPoolParams, input_shape=None
) -> np.ndarray:
    """Gradient w.r.t. the input; accumulates the raw-weight gradient into ``params.grad``.

    Through the softmax, d out / d w*_k = sum_j v_j W_j (delta_jk - W_k)
    = W_k (v_k - out), so each channel's raw-weight gradient is
    W_k * sum over windows of g * (v_k - out).
    """
    _check_grad_out(grad_out, saved)
    shape = saved.input_shape if input_shape is None else tuple(input_shape)
    W = saved.normalized_weights
    contrib = grad_out[..., None] * W[None, :, None, None, :]
    grad_in = _scatter(saved.top_indices, contrib, shape)
    centered = saved.sorted_values - saved.output[..., None]
    params.grad += W * np.einsum("bchw,bchwk->ck", grad_out, centered)
    return grad_in


def pool_forward(x: np.ndarray, cfg: PoolConfig, params: Optional[SortedPoolParams] = None):
    if cfg.mode == "sorted":
        return sorted_pool_forward(x, params, cfg)
    if cfg.mode == "avg":
        return avg_pool(x, cfg)
    return kth_max_forward(x, cfg)


def pool_backward(grad_out: np.ndarray, saved: PoolSaved, cfg: PoolConfig,
                  params: Optional[SortedPoolParams] = None) -> np.ndarray:
    if cfg.mode == "sorted":
        return sorted_pool_backward(grad_out, saved, params)
    if cfg.mode == "avg":
        return avg_pool_backward(grad_out, saved)
    return kth_max_backward(grad_out, saved)
