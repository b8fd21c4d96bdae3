"""SGD with momentum over ``Param`` lists.

Update rule per parameter: ``v = momentum * v + g (+ weight_decay * p)``;
``p -= lr * v``; then ``g = 0``. Sorted-pooling raw weights go through the
same update; their learning rate and weight decay can optionally be set
apart from the rest.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

POOL_SUFFIX = ".raw_weights"


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class SgdState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    pool_learning_rate: Optional[float] = None
    pool_weight_decay: Optional[float] = None
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")

    def hyper(self, name: str) -> tuple[float, float]:
        if name.endswith(POOL_SUFFIX):
            lr = self.learning_rate if self.pool_learning_rate is None else self.pool_learning_rate
            wd = self.weight_decay if self.pool_weight_decay is None else self.pool_weight_decay
            return lr, wd
        return self.learning_rate, self.weight_decay


def zero_grads(params: Iterable) -> None:
    for p in params:
        p.grad[...] = 0.0


def sgd_step(params: Iterable, state: SgdState) -> None:
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {p.name}")
    for p in params:
        lr, wd = state.hyper(p.name)
        v = state.velocity.get(p.name)
        if v is None:
            v = state.velocity[p.name] = np.zeros_like(p.value)
        elif v.shape != p.value.shape:
            raise ValueError(f"velocity shape {v.shape} does not match {p.name} {p.value.shape}")
        v *= state.momentum
        v += p.grad
        if wd:
            v += wd * p.value
        p.value -= lr * v
    zero_grads(params)
