"""Gradient checks of every operator and of the assembled network.

Used by the ``gradcheck`` subcommand. Operator checks perturb one input
coordinate at a time (step ``h = 1e-6``); network checks either do the same
for every parameter, or probe random directions per parameter block.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .config import ExperimentConfig
from .gradcheck import compare, finite_diff, tie_free
from .pooling import PoolConfig, SortedPoolParams, pool_backward, pool_forward


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance

    def __str__(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<40} max rel err {self.error:.2e} (< {self.tolerance:g})"


def _pool_checks(rng) -> list[CheckResult]:
    out = []
    x = tie_free(rng, (2, 3, 7, 7))
    up = rng.normal(size=(2, 3, 3, 3))
    cases = [PoolConfig.kth_max(k) for k in (1, 2, 3, 4)] + [PoolConfig.avg()]
    cases += [PoolConfig.sorted(K) for K in (1, 2, 4, 9)]
    for cfg in cases:
        params = None
        if cfg.mode == "sorted":
            params = SortedPoolParams(rng.normal(size=(3, cfg.k)))

        def loss(_):
            return float(np.sum(pool_forward(x, cfg, params)[0] * up))

        _, saved = pool_forward(x, cfg, params)
        gx = pool_backward(up, saved, cfg, params)
        out.append(CheckResult(f"pool {cfg.label()} input", compare(gx, finite_diff(loss, x)).max_relative_error, 1e-5))
        if params is not None:
            out.append(CheckResult(f"pool {cfg.label()} weights",
                                   compare(params.grad, finite_diff(loss, params.raw_weights)).max_relative_error, 1e-5))
    return out


def _layer_checks(rng) -> list[CheckResult]:
    out = []
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    up = rng.normal(size=(1, 3, 3, 3))
    gx, gw, gb = L.conv2d_backward(up, x, w, 1)

    def conv(_):
        return float(np.sum(L.conv2d_forward(x, w, b) * up))

    err = max(compare(g, finite_diff(conv, a)).max_relative_error for g, a in ((gx, x), (gw, w), (gb, b)))
    out.append(CheckResult("conv2d", err, 1e-5))

    xd = rng.normal(size=(3, 4))
    wd = rng.normal(size=(2, 4))
    bd = rng.normal(size=2)
    upd = rng.normal(size=(3, 2))
    grads = L.dense_backward(upd, xd, wd)

    def dense(_):
        return float(np.sum(L.dense_forward(xd, wd, bd) * upd))

    err = max(compare(g, finite_diff(dense, a)).max_relative_error for g, a in zip(grads, (xd, wd, bd)))
    out.append(CheckResult("dense", err, 1e-5))

    xr = tie_free(rng, (3, 4))
    upr = rng.normal(size=xr.shape)
    numeric = finite_diff(lambda z: float(np.sum(L.relu_forward(z) * upr)), xr)
    out.append(CheckResult("relu", compare(L.relu_backward(upr, xr), numeric).max_relative_error, 1e-5))

    logits = rng.normal(size=(4, 5))
    labels = np.array([0, 4, 2, 2])
    _, g = L.softmax_cross_entropy(logits, labels)
    numeric = finite_diff(lambda z: L.softmax_cross_entropy(z, labels)[0], logits)
    out.append(CheckResult("softmax cross-entropy", compare(g, numeric).max_relative_error, 1e-5))
    return out


def operator_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return _pool_checks(rng) + _layer_checks(rng)


def network_check(cfg: ExperimentConfig, seed: int = 0, per_coordinate: bool = False) -> list[CheckResult]:
    """Check every parameter block of the network on a 2-image tie-free batch.

    ``per_coordinate`` differentiates each scalar parameter separately at
    ``h = 1e-6`` (tolerance 1e-4); otherwise three random directions per
    block are probed at ``h = 1e-7`` (tolerance 1e-5).
    """
    from .experiment import build_network

    rng = np.random.default_rng(seed)
    graph = build_network(cfg, cfg.seed)
    x = tie_free(rng, (2, 1, 28, 28))
    labels = np.array([3, 7])

    def loss():
        return L.softmax_cross_entropy(graph.forward(x), labels)[0]

    _, grad = L.softmax_cross_entropy(graph.forward(x), labels)
    graph.backward(grad)
    out = []
    for p in graph.params():
        if per_coordinate:
            rep = compare(p.grad, finite_diff(lambda _: loss(), p.value))
            out.append(CheckResult(f"{cfg.variant} {p.name}", rep.max_relative_error, 1e-4, str(rep)))
            continue
        base = p.value.copy()
        err = 0.0
        for _ in range(3):
            v = rng.normal(size=base.shape)

            def along(t):
                p.value[...] = base + t[0] * v
                return loss()

            numeric = finite_diff(along, np.zeros(1), h=1e-7)
            p.value[...] = base
            err = max(err, compare(np.array([np.sum(p.grad * v)]), numeric).max_relative_error)
        out.append(CheckResult(f"{cfg.variant} {p.name} (directional)", err, 1e-5))
    return out
