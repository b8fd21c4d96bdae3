"""Differentiable layers and a sequential layer graph.

Each layer caches what it needs during ``forward`` and consumes the cache in
``backward``; gradients are accumulated into arrays that alias the
parameters exposed by ``params()``, so the optimizer can update every
parameter (including sorted-pooling weights) through one code path.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import pooling
from .pooling import PoolConfig, SortedPoolParams
from .tensor import DTYPE, ShapeError, output_extent


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray


class GraphError(RuntimeError):
    pass


# -- functional ops ---------------------------------------------------------

def im2col(x: np.ndarray, kernel: tuple[int, int], stride: int = 1) -> np.ndarray:
    """Columns of shape (C * kh * kw, B * outH * outW) for a single GEMM."""
    B, C, H, W = x.shape
    kh, kw = kernel
    oh, ow = output_extent(H, kh, stride), output_extent(W, kw, stride)
    cols = np.empty((C, kh, kw, B, oh, ow), dtype=DTYPE)
    xt = x.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]
    return cols.reshape(C * kh * kw, B * oh * ow)


def col2im(dcols: np.ndarray, input_shape, kernel: tuple[int, int], stride: int = 1) -> np.ndarray:
    """Adjoint of ``im2col``: sums column entries back onto the input grid."""
    B, C, H, W = input_shape
    kh, kw = kernel
    oh, ow = output_extent(H, kh, stride), output_extent(W, kw, stride)
    d = dcols.reshape(C, kh, kw, B, oh, ow)
    out = np.zeros((C, B, H, W), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += d[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _check_conv(x: np.ndarray, weight: np.ndarray) -> None:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1,
                   cols: Optional[np.ndarray] = None) -> np.ndarray:
    """Valid cross-correlation of (B, C, H, W) input with (O, C, kh, kw) kernels."""
    _check_conv(x, weight)
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")
    O, _, kh, kw = weight.shape
    B, _, H, W = x.shape
    oh, ow = output_extent(H, kh, stride), output_extent(W, kw, stride)
    if cols is None:
        cols = im2col(x, (kh, kw), stride)
    out = weight.reshape(O, -1) @ cols + bias[:, None]
    return out.reshape(O, B, oh, ow).transpose(1, 0, 2, 3)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray, stride: int = 1,
                    cols: Optional[np.ndarray] = None):
    """Returns (grad_input, grad_weight, grad_bias)."""
    _check_conv(x, weight)
    O, C, kh, kw = weight.shape
    B, _, H, W = x.shape
    expected = (B, O, output_extent(H, kh, stride), output_extent(W, kw, stride))
    if grad_out.shape != expected:
        raise ShapeError(f"conv2d grad_out shape {grad_out.shape}, forward output was {expected}")
    if cols is None:
        cols = im2col(x, (kh, kw), stride)
    g = grad_out.transpose(1, 0, 2, 3).reshape(O, -1)
    grad_w = (g @ cols.T).reshape(weight.shape)
    grad_b = g.sum(axis=1)
    grad_x = col2im(weight.reshape(O, -1).T @ g, x.shape, (kh, kw), stride)
    return grad_x, grad_w, grad_b


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    return x @ weight.T + bias


def dense_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray):
    if grad_out.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"dense: grad_out {grad_out.shape} inconsistent with input {x.shape}")
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def flatten_forward(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def flatten_backward(grad_out: np.ndarray, input_shape) -> np.ndarray:
    return grad_out.reshape(input_shape)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    B, n_classes = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(B)
    loss = -float(log_p[rows, labels].mean())
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return loss, grad / B


# -- layers -----------------------------------------------------------------

def _uniform_init(rng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return (rng.uniform_array(int(np.prod(shape))) * 2.0 - 1.0).reshape(shape) * bound


class Layer:
    name = "layer"

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def params(self) -> list[Param]:
        return []

    def _take_cache(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise GraphError(f"{self.name}: backward called without a preceding forward")
        self._cache = None
        return cache


class Conv2D(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1,
                 rng=None, name: str = "conv"):
        self.name = name
        self.stride = stride
        shape = (out_channels, in_channels, kernel, kernel)
        fan_in = in_channels * kernel * kernel
        self.weight = _uniform_init(rng, shape, fan_in) if rng is not None else np.zeros(shape)
        self.bias = np.zeros(out_channels, dtype=DTYPE)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    def forward(self, x):
        cols = im2col(x, self.weight.shape[2:], self.stride) if x.ndim == 4 else None
        self._cache = (x, cols)
        return conv2d_forward(x, self.weight, self.bias, self.stride, cols)

    def backward(self, grad_out):
        x, cols = self._take_cache()
        gx, gw, gb = conv2d_backward(grad_out, x, self.weight, self.stride, cols)
        self.grad_weight += gw
        self.grad_bias += gb
        return gx

    def output_shape(self, shape):
        B, C, H, W = shape
        O, Ci, kh, kw = self.weight.shape
        if C != Ci:
            raise ShapeError(f"{self.name}: expects {Ci} input channels, got shape {shape}")
        return (B, O, output_extent(H, kh, self.stride), output_extent(W, kw, self.stride))

    def params(self):
        return [Param(f"{self.name}.weight", self.weight, self.grad_weight),
                Param(f"{self.name}.bias", self.bias, self.grad_bias)]


class ReLU(Layer):
    def __init__(self, name: str = "relu"):
        self.name = name
        self._cache = None

    def forward(self, x):
        self._cache = x
        return relu_forward(x)

    def backward(self, grad_out):
        return relu_backward(grad_out, self._take_cache())


class Pool(Layer):
    """Pooling layer; owns a (channels, K) weight block in sorted mode."""

    def __init__(self, cfg: PoolConfig, channels: Optional[int] = None, init: str = "uniform",
                 init_rate: float = 1.0, name: str = "pool"):
        self.name = name
        self.cfg = cfg
        self.sorted_params: Optional[SortedPoolParams] = None
        if cfg.mode == "sorted":
            if channels is None:
                raise ValueError("sorted pooling needs the channel count")
            self.sorted_params = pooling.init_weights(channels, cfg.k, init, init_rate)
        self._cache = None

    def forward(self, x):
        out, saved = pooling.pool_forward(x, self.cfg, self.sorted_params)
        self._cache = saved
        return out

    def backward(self, grad_out):
        return pooling.pool_backward(grad_out, self._take_cache(), self.cfg, self.sorted_params)

    def output_shape(self, shape):
        B, C, H, W = shape
        if self.sorted_params is not None and self.sorted_params.channels != C:
            raise ShapeError(f"{self.name}: weights for {self.sorted_params.channels} channels, input {shape}")
        return (B, C, *self.cfg.output_hw(H, W))

    def params(self):
        if self.sorted_params is None:
            return []
        sp = self.sorted_params
        return [Param(f"{self.name}.raw_weights", sp.raw_weights, sp.grad)]

    def normalized_weights(self) -> Optional[np.ndarray]:
        return None if self.sorted_params is None else self.sorted_params.normalized()


class Flatten(Layer):
    def __init__(self, name: str = "flatten"):
        self.name = name
        self._cache = None

    def forward(self, x):
        self._cache = x.shape
        return flatten_forward(x)

    def backward(self, grad_out):
        return flatten_backward(grad_out, self._take_cache())

    def output_shape(self, shape):
        return (shape[0], int(np.prod(shape[1:])))


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int, rng=None, name: str = "dense"):
        self.name = name
        shape = (out_features, in_features)
        self.weight = _uniform_init(rng, shape, in_features) if rng is not None else np.zeros(shape)
        self.bias = np.zeros(out_features, dtype=DTYPE)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    def forward(self, x):
        self._cache = x
        return dense_forward(x, self.weight, self.bias)

    def backward(self, grad_out):
        gx, gw, gb = dense_backward(grad_out, self._take_cache(), self.weight)
        self.grad_weight += gw
        self.grad_bias += gb
        return gx

    def output_shape(self, shape):
        if len(shape) != 2 or shape[1] != self.weight.shape[1]:
            raise ShapeError(f"{self.name}: expects (B, {self.weight.shape[1]}), got {shape}")
        return (shape[0], self.weight.shape[0])

    def params(self):
        return [Param(f"{self.name}.weight", self.weight, self.grad_weight),
                Param(f"{self.name}.bias", self.bias, self.grad_bias)]


class LayerGraph:
    def __init__(self, layers: Sequence[Layer] = ()):
        self.layers = list(layers)

    def forward(self, x: np.ndarray, stop_after: Optional[str] = None) -> np.ndarray:
        """Run the layers in order; ``stop_after`` names a layer whose output is returned."""
        for layer in self.layers:
            x = layer.forward(x)
            if stop_after is not None and layer.name == stop_after:
                break
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def pool_layers(self) -> list[Pool]:
        return [layer for layer in self.layers if isinstance(layer, Pool)]

    def shape_pass(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        shape = tuple(input_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def predict(self, x: np.ndarray, chunk: int = 1000) -> np.ndarray:
        """Logits for a large input, evaluated in chunks."""
        return np.concatenate([self.forward(x[i:i + chunk]) for i in range(0, len(x), chunk)])


def graph_forward(graph: LayerGraph, x: np.ndarray) -> np.ndarray:
    return graph.forward(x)


def graph_backward(graph: LayerGraph, grad_logits: np.ndarray) -> np.ndarray:
    return graph.backward(grad_logits)


def graph_params(graph: LayerGraph) -> list[Param]:
    return graph.params()
