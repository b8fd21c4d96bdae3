"""Training runs, pooling-variant sweeps and episodic one-shot evaluation."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import data as dataio
from .config import ConfigError, ExperimentConfig
from .layers import (Conv2D, Dense, Flatten, LayerGraph, Pool, ReLU,
                     softmax_cross_entropy)
from .optim import SgdState, sgd_step, zero_grads
from .rng import SplitMix64, derive_seed

log = logging.getLogger(__name__)

CONV_CHANNELS = (8, 32, 64)
BASE_COLUMNS = ["run_id", "seed", "variant", "epoch", "step",
                "train_loss", "train_err_pct", "test_err_pct"]
EMBEDDING_LAYER = "flatten"


class TrainingDivergedError(FloatingPointError):
    pass


def variant_config(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    """Apply a variant string such as ``max``, ``avg``, ``kth:3`` or ``sorted:4``."""
    mode, _, k = variant.partition(":")
    if mode in ("max", "avg"):
        return cfg.replace(pool_mode=mode, pool_k=1)
    if mode in ("kth", "sorted") and k:
        return cfg.replace(pool_mode=mode, pool_k=int(k))
    raise ConfigError(f"bad variant {variant!r}; expected max, avg, kth:<k> or sorted:<K>")


def build_network(cfg: ExperimentConfig, seed: int, input_hw=(28, 28), n_classes: int = 10) -> LayerGraph:
    """Three conv/ReLU/pool stages, then Flatten and a Dense classifier.

    Pools are 3x3 stride 2; a stage whose input is too small for 3x3 falls
    back to 2x2 stride 2 (on 28x28 this is the last stage: 2x2 -> 1x1).
    Conv and dense weights are drawn in a fixed order from one stream, so
    networks that differ only in pooling start from identical weights.
    """
    rng = SplitMix64(derive_seed(seed, 1))
    layers = []
    h, w = input_hw
    in_ch = 1
    for i, out_ch in enumerate(CONV_CHANNELS, 1):
        layers.append(Conv2D(in_ch, out_ch, 3, 1, rng=rng, name=f"conv{i}"))
        layers.append(ReLU(name=f"relu{i}"))
        h, w = h - 2, w - 2
        if h < 2 or w < 2:
            raise ConfigError(f"input {input_hw} too small for three pooling stages")
        kernel = (3, 3) if min(h, w) >= 3 else (2, 2)
        pcfg = cfg.pool_config(kernel)
        layers.append(Pool(pcfg, channels=out_ch, init=cfg.init, init_rate=cfg.init_rate, name=f"pool{i}"))
        h, w = pcfg.output_hw(h, w)
        in_ch = out_ch
    layers.append(Flatten(name=EMBEDDING_LAYER))
    layers.append(Dense(in_ch * h * w, n_classes, rng=rng, name="dense"))
    return LayerGraph(layers)


def pool_param_count(graph: LayerGraph) -> int:
    return sum(p.value.size for layer in graph.pool_layers() for p in layer.params())


def load_data(cfg: ExperimentConfig) -> tuple[dataio.Dataset, dataio.Dataset]:
    if cfg.dataset == "synthetic":
        train = dataio.synthetic_dataset(cfg.seed, cfg.synthetic_train)
        test = dataio.synthetic_dataset(cfg.seed + 1_000_003, cfg.synthetic_test)
        return train, test
    train = dataio.load_mnist(cfg.data_dir, "train").subset(cfg.subset or None)
    test = dataio.load_mnist(cfg.data_dir, "test").subset(cfg.test_subset or None)
    return train, test


def error_pct(graph: LayerGraph, ds: dataio.Dataset) -> float:
    pred = np.argmax(graph.predict(ds.images), axis=1)
    return 100.0 * float(np.mean(pred != ds.labels))


def mean_pool_weights(graph: LayerGraph) -> list[np.ndarray]:
    """Per sorted layer, the normalized weight rows averaged over channels."""
    return [layer.normalized_weights().mean(axis=0)
            for layer in graph.pool_layers() if layer.sorted_params is not None]


def weight_columns(graph: LayerGraph) -> list[str]:
    cols = []
    for li, wbar in enumerate(mean_pool_weights(graph), 1):
        cols += [f"w_l{li}_k{k}" for k in range(1, len(wbar) + 1)]
    return cols


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class CsvWriter:
    """Appends rows with a fixed header, flushing after each row."""

    def __init__(self, path, columns: Sequence[str]):
        self.columns = list(columns)
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="", encoding="utf-8")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(self.columns)

    def write(self, row: dict) -> None:
        self._csv.writerow([_fmt(row.get(c, "")) for c in self.columns])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class RunResult:
    variant: str
    seed: int
    graph: LayerGraph
    rows: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)  # mini-batch loss of every SGD step

    def test_error(self, epoch: int) -> float:
        for r in self.rows:
            if r["epoch"] == epoch and r["step"] == r["epoch_end_step"]:
                return r["test_err_pct"]
        raise KeyError(f"no evaluation at the end of epoch {epoch}")


def _diagnose(graph: LayerGraph, images: np.ndarray) -> str:
    x = images
    for layer in graph.layers:
        x = layer.forward(x)
        if not np.all(np.isfinite(x)):
            return layer.name
    return "loss"


def train_run(cfg: ExperimentConfig, seed: int, train: dataio.Dataset, test: dataio.Dataset,
              writer: Optional[CsvWriter] = None, graph: Optional[LayerGraph] = None) -> RunResult:
    """One seeded training run; evaluates at each epoch end (and every ``eval_every`` steps)."""
    graph = graph or build_network(cfg, seed)
    variant = cfg.variant
    state = SgdState(cfg.learning_rate, cfg.momentum, cfg.weight_decay,
                     cfg.pool_learning_rate, cfg.pool_weight_decay)
    params = graph.params()
    zero_grads(params)
    plan = dataio.BatchPlan(derive_seed(seed, 2), min(cfg.batch_size, len(train)))
    steps_per_epoch = math.ceil(len(train) / plan.batch_size)
    result = RunResult(variant, seed, graph)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        loss_sum = wrong = seen = 0.0
        for images, labels in dataio.batches(train, plan, epoch):
            logits = graph.forward(images)
            loss, grad = softmax_cross_entropy(logits, labels)
            step += 1
            if not math.isfinite(loss):
                layer = _diagnose(graph, images)
                raise TrainingDivergedError(
                    f"{variant} seed {seed}: non-finite loss at epoch {epoch} step {step}; "
                    f"first non-finite output in layer {layer}"
                )
            graph.backward(grad)
            sgd_step(params, state)
            result.step_losses.append(loss)
            loss_sum += loss * len(labels)
            wrong += float(np.sum(np.argmax(logits, axis=1) != labels))
            seen += len(labels)
            at_epoch_end = step == epoch * steps_per_epoch
            if at_epoch_end or (cfg.eval_every and step % cfg.eval_every == 0):
                row = {
                    "run_id": f"{variant}-s{seed}", "seed": seed, "variant": variant,
                    "epoch": epoch, "step": step,
                    "train_loss": loss_sum / seen, "train_err_pct": 100.0 * wrong / seen,
                    "test_err_pct": error_pct(graph, test),
                    "epoch_end_step": epoch * steps_per_epoch,
                }
                for li, wbar in enumerate(mean_pool_weights(graph), 1):
                    for k, v in enumerate(wbar, 1):
                        row[f"w_l{li}_k{k}"] = float(v)
                result.rows.append(row)
                if writer is not None:
                    writer.write(row)
                log.info("%s seed %d epoch %d step %d: loss %.4f test err %.2f%%", variant, seed,
                         epoch, step, row["train_loss"], row["test_err_pct"])
    return result


def replicate_seeds(cfg: ExperimentConfig) -> list[int]:
    return [cfg.seed + r for r in range(cfg.replicates)]


def train(cfg: ExperimentConfig, out_dir=None, data=None) -> list[RunResult]:
    """Train every replicate of the configured variant, writing metrics.csv and checkpoints."""
    from .checkpoint import save_checkpoint

    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = data or load_data(cfg)
    columns = BASE_COLUMNS + weight_columns(build_network(cfg, cfg.seed))
    results = []
    with CsvWriter(out / "metrics.csv", columns) as writer:
        for seed in replicate_seeds(cfg):
            res = train_run(cfg, seed, train_ds, test_ds, writer)
            save_checkpoint(out / f"{res.variant}-s{seed}.ckpt", res.graph, cfg)
            results.append(res)
    return results


def sweep(cfg: ExperimentConfig, variants: Sequence[str], out_dir=None, data=None) -> dict[str, list[RunResult]]:
    """Run each variant on every replicate seed with shared data order and initial weights.

    Writes ``metrics.csv`` (all evaluation rows) and ``comparison.csv`` (test
    error per seed and epoch, one column per variant).
    """
    if len(variants) < 2:
        raise ConfigError("a sweep needs at least two variants")
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = data or load_data(cfg)
    cfgs = [variant_config(cfg, v) for v in variants]
    labels = [c.variant for c in cfgs]
    wcols = []
    for c in cfgs:
        wcols += [w for w in weight_columns(build_network(c, cfg.seed)) if w not in wcols]
    results: dict[str, list[RunResult]] = {label: [] for label in labels}
    with CsvWriter(out / "metrics.csv", BASE_COLUMNS + wcols) as writer:
        for seed in replicate_seeds(cfg):
            for c, label in zip(cfgs, labels):
                results[label].append(train_run(c, seed, train_ds, test_ds, writer))
    with CsvWriter(out / "comparison.csv", ["seed", "epoch"] + [f"{l}_test_err_pct" for l in labels]) as w:
        for i, seed in enumerate(replicate_seeds(cfg)):
            for epoch in range(1, cfg.epochs + 1):
                row = {"seed": seed, "epoch": epoch}
                for label in labels:
                    row[f"{label}_test_err_pct"] = results[label][i].test_error(epoch)
                w.write(row)
    return results


def summarize(results: dict[str, list[RunResult]], epochs: Iterable[int]) -> str:
    buf = io.StringIO()
    for label, runs in results.items():
        means = [np.mean([r.test_error(e) for r in runs]) for e in epochs]
        buf.write(f"{label:>10}: " + "  ".join(f"ep{e} {m:6.2f}%" for e, m in zip(epochs, means)) + "\n")
    return buf.getvalue()


# -- episodic one-shot evaluation ------------------------------------------

@dataclass
class EpisodicResult:
    accuracies: np.ndarray  # per-episode accuracy in [0, 1]

    @property
    def mean(self) -> float:
        return float(self.accuracies.mean())

    @property
    def stderr(self) -> float:
        n = len(self.accuracies)
        return float(self.accuracies.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")


def sample_episodes(labels: np.ndarray, classes: Sequence[int], episodes: int, seed: int) -> np.ndarray:
    """Episodes as an (episodes, n_way, 2) index array of (support, query) pairs.

    For every class in each episode one support and one distinct query
    example are drawn uniformly.
    """
    rng = SplitMix64(derive_seed(seed, 0xE915))
    pools = [np.flatnonzero(labels == c) for c in classes]
    if any(len(p) < 2 for p in pools):
        raise ValueError("every episode class needs at least two examples")
    out = np.empty((episodes, len(classes), 2), dtype=np.int64)
    for ci, pool in enumerate(pools):
        n = len(pool)
        u = rng.uniform_array(2 * episodes).reshape(episodes, 2)
        s = np.floor(u[:, 0] * n).astype(np.int64)
        # query drawn from the remaining n - 1 examples
        q = np.floor(u[:, 1] * (n - 1)).astype(np.int64)
        q = q + (q >= s)
        out[:, ci, 0] = pool[s]
        out[:, ci, 1] = pool[q]
    return out


def episodic_accuracy(embeddings: np.ndarray, episodes: np.ndarray) -> EpisodicResult:
    """Nearest-cosine-neighbour accuracy of each query against the episode's supports."""
    norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
    unit = embeddings / np.maximum(norms, 1e-12)
    support = unit[episodes[:, :, 0]]  # (E, n_way, d)
    query = unit[episodes[:, :, 1]]
    sims = np.einsum("eqd,esd->eqs", query, support)
    pred = np.argmax(sims, axis=2)
    correct = pred == np.arange(episodes.shape[1])[None, :]
    return EpisodicResult(correct.mean(axis=1))


def embed(graph: LayerGraph, images: np.ndarray, chunk: int = 1000) -> np.ndarray:
    return np.concatenate([graph.forward(images[i:i + chunk], stop_after=EMBEDDING_LAYER)
                           for i in range(0, len(images), chunk)])


def episodic_eval(graph_or_embed, cfg: ExperimentConfig, pool: dataio.Dataset,
                  trained_classes: Optional[Sequence[int]] = None) -> EpisodicResult:
    """5-way 1-shot accuracy on the held-out classes of ``pool``.

    ``graph_or_embed`` is a trained ``LayerGraph`` or any callable mapping an
    image batch to embedding vectors. ``trained_classes`` are the classes the
    embedding saw during training (e.g. from its checkpoint's config); none of
    them may appear among the episode classes.
    """
    _, held_out = cfg.class_split()
    if trained_classes is not None:
        check_class_split(trained_classes, held_out)
    fn: Callable = (graph_or_embed if callable(graph_or_embed) and not isinstance(graph_or_embed, LayerGraph)
                    else lambda x: embed(graph_or_embed, x))
    held = pool.with_classes(held_out)
    episodes = sample_episodes(held.labels, held_out, cfg.episodes, cfg.episode_seed)
    return episodic_accuracy(fn(held.images), episodes)


def check_class_split(train_classes: Sequence[int], eval_classes: Sequence[int]) -> None:
    overlap = set(train_classes) & set(eval_classes)
    if overlap:
        raise ConfigError(f"classes {sorted(overlap)} appear in both the training and episode split")


def paired_difference(a: EpisodicResult, b: EpisodicResult) -> tuple[float, float]:
    """Mean and standard error of per-episode accuracy differences ``b - a``."""
    d = b.accuracies - a.accuracies
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(len(d)))


def train_embedding(cfg: ExperimentConfig, seed: int, train_ds: dataio.Dataset,
                    test_ds: dataio.Dataset) -> RunResult:
    """Train on the configured training classes only."""
    train_classes, _ = cfg.class_split()
    return train_run(cfg, seed, train_ds.with_classes(train_classes), test_ds.with_classes(train_classes))
