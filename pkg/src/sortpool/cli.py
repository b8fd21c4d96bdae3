"""Command-line entry point: ``sortpool <subcommand> [options]``.

Subcommands
    train           train the configured pooling variant on every replicate seed
    sweep-k         compare kth-max pooling for several k (``--ks 1,2,3,4``)
    compare-sorted  compare max pooling with sorted pooling (``--K 4``)
    episodic        5-way 1-shot evaluation of max vs sorted embeddings
    gradcheck       finite-difference checks of every operator and the network
    print-config    print the effective configuration

Configuration comes from defaults, then ``--config FILE``, then per-field
flags (``--learning-rate 0.05``, ``--pool-mode sorted`` ...). Exit status is
0 on success; failures print ``error [<category>]: ...`` and exit with

    2 config   3 data   4 checkpoint   5 training   6 check failed   1 other
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import checkpoint as ck
from . import experiment as E
from .checks import network_check, operator_checks
from .config import ConfigError, ExperimentConfig, coerce, parse_config
from .data import IdxError

log = logging.getLogger("sortpool")

EXIT_CODES = {"config": 2, "data": 3, "checkpoint": 4, "training": 5, "check": 6, "other": 1}


class CheckFailed(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("-q", "--quiet", action="store_true", help="only print results")
    group = common.add_argument_group("config overrides")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        group.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper(),
                           help=f"override {f.name} (default {f.default})")

    parser = argparse.ArgumentParser(prog="sortpool", description="kth-max and sorted pooling experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the configured variant")
    p = sub.add_parser("sweep-k", parents=[common], help="kth-max pooling sweep over k")
    p.add_argument("--ks", default="1,2,3,4", help="comma-separated k values (default 1,2,3,4)")
    p = sub.add_parser("compare-sorted", parents=[common], help="max vs sorted pooling")
    p.add_argument("--K", type=int, default=4, help="sorted pooling width (default 4)")
    p = sub.add_parser("episodic", parents=[common], help="5-way 1-shot evaluation on held-out classes")
    p.add_argument("--K", type=int, default=4, help="sorted pooling width (default 4)")
    p.add_argument("--checkpoint", type=Path, action="append",
                   help="evaluate this checkpoint instead of training (repeatable)")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--per-coordinate", action="store_true",
                   help="check every network parameter separately (slow)")
    sub.add_parser("print-config", parents=[common], help="print the effective configuration")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    overrides = {f.name: coerce(f.name, getattr(args, f.name))
                 for f in fields(ExperimentConfig) if getattr(args, f.name) is not None}
    return cfg.replace(**overrides) if overrides else cfg


def _variants_from_ks(text: str) -> list[str]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise ConfigError(f"--ks must list integers, got {text!r}") from None
    return [f"kth:{k}" for k in ks]


def cmd_train(cfg: ExperimentConfig, args) -> None:
    results = E.train(cfg)
    print(E.summarize({cfg.variant: results}, range(1, cfg.epochs + 1)), end="")
    print(f"wrote {Path(cfg.out_dir) / 'metrics.csv'}")


def cmd_sweep(cfg: ExperimentConfig, variants: list[str]) -> None:
    results = E.sweep(cfg, variants)
    print(E.summarize(results, range(1, cfg.epochs + 1)), end="")
    print(f"wrote {Path(cfg.out_dir) / 'comparison.csv'}")


def _episodic_models(cfg: ExperimentConfig, args):
    """(label, embedding graph, classes it was trained on) per model."""
    if args.checkpoint:
        models = []
        for path in args.checkpoint:
            _, stored, _ = ck.read_checkpoint(path)
            graph = E.build_network(stored, stored.seed)
            ck.load_checkpoint(path, graph, stored)
            models.append((f"{stored.variant}:{path.name}", graph, stored.class_split()[0]))
        return models
    train_ds, test_ds = E.load_data(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    models = []
    for variant in ("max", f"sorted:{args.K}"):
        vcfg = E.variant_config(cfg, variant)
        run = E.train_embedding(vcfg, cfg.seed, train_ds, test_ds)
        ck.save_checkpoint(out / f"episodic-{vcfg.variant}-s{cfg.seed}.ckpt", run.graph, vcfg)
        models.append((vcfg.variant, run.graph, vcfg.class_split()[0]))
    return models


def cmd_episodic(cfg: ExperimentConfig, args) -> None:
    pool = E.load_data(cfg)[1]
    results = []
    for label, graph, trained in _episodic_models(cfg, args):
        res = E.episodic_eval(graph, cfg, pool, trained_classes=trained)
        results.append((label, res))
        print(f"{label:>12}: accuracy {100 * res.mean:.2f}% +/- {100 * res.stderr:.2f}% "
              f"over {len(res.accuracies)} episodes")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with E.CsvWriter(out / "episodic.csv", ["episode"] + [label for label, _ in results]) as w:
        for i in range(cfg.episodes):
            w.write({"episode": i, **{label: float(r.accuracies[i]) for label, r in results}})
    if len(results) == 2:
        (la, a), (lb, b) = results
        mean, se = E.paired_difference(a, b)
        print(f"{lb} - {la}: {100 * mean:+.2f}% +/- {100 * se:.2f}% (paired)")


def cmd_gradcheck(cfg: ExperimentConfig, args) -> None:
    results = operator_checks(cfg.seed) + network_check(cfg, cfg.seed, args.per_coordinate)
    for r in results:
        print(r)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CheckFailed(f"{len(failed)} gradient check(s) failed: {', '.join(failed)}")


def run(argv=None) -> None:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(message)s", datefmt="%H:%M:%S")
    cfg = resolve_config(args)
    if args.command == "print-config":
        print(cfg.to_text(), end="")
    elif args.command == "train":
        cmd_train(cfg, args)
    elif args.command == "sweep-k":
        cmd_sweep(cfg, _variants_from_ks(args.ks))
    elif args.command == "compare-sorted":
        cmd_sweep(cfg, ["max", f"sorted:{args.K}"])
    elif args.command == "episodic":
        cmd_episodic(cfg, args)
    elif args.command == "gradcheck":
        cmd_gradcheck(cfg, args)


def categorize(exc: BaseException) -> str:
    if isinstance(exc, ck.CheckpointError):
        return "checkpoint"
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, (IdxError, FileNotFoundError)):
        return "data"
    if isinstance(exc, (E.TrainingDivergedError, FloatingPointError)):
        return "training"
    if isinstance(exc, CheckFailed):
        return "check"
    return "other"


def main(argv=None) -> int:
    try:
        run(argv)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit category
        category = categorize(exc)
        print(f"error [{category}]: {exc}", file=sys.stderr)
        return EXIT_CODES[category]
    return 0


if __name__ == "__main__":
    sys.exit(main())
