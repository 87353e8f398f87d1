"""``mdmx`` command line: gen, run, baseline, select, eval.

Exit status is 0 on success, 1 for invalid input (config, data files,
checkpoints) and 2 when training aborts at runtime.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ._rng import derive_seed
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .datagen import CleanDataset, DatasetFormatError, NoisyDataset, load_dataset, make_blobs, make_noisy, save_dataset
from .evaluation import Evaluator, MetricsFormatError, accuracy
from .nn import DivergenceError, ShapeError, load_checkpoint
from .pipeline import PipelineAbort, fit_split, run_baseline, run_full, select_ood
from .selection import write_selection_csv

log = logging.getLogger("mdmx")

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 1, 2
WORKSPACE_ENV = "MDMX_WORKSPACE"
_TEST_SET = 4  # derive_seed tag; 1..3 are used by make_noisy

TRAIN_CSV, TEST_CSV = "train.csv", "test.csv"


class UsageError(ValueError):
    pass


def workspace() -> Path:
    return Path(os.environ.get(WORKSPACE_ENV) or os.getcwd())


def _resolve(path) -> Path:
    path = Path(path)
    return path if path.is_absolute() else workspace() / path


def effective_config(args) -> ExperimentConfig:
    cfg = load_config(_resolve(args.config)) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = cfg.with_out_dir(args.out)
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = _resolve(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    return out


def generate(cfg: ExperimentConfig) -> tuple[NoisyDataset, CleanDataset]:
    d, n = cfg.data, cfg.noise
    train = make_noisy(d.n_per_class, d.n_classes, d.dim, d.spread, n.r_in, n.r_out, n.id_mode, d.ood_source, cfg.seed)
    test = make_blobs(d.test_per_class, d.n_classes, d.dim, d.spread, derive_seed(cfg.seed, _TEST_SET))
    return train, test


def _datasets(cfg: ExperimentConfig, out: Path) -> tuple[NoisyDataset, NoisyDataset]:
    """Load ``train.csv``/``test.csv`` from the output directory, generating them first if absent."""
    if not (out / TRAIN_CSV).exists() or not (out / TEST_CSV).exists():
        train, test = generate(cfg)
        save_dataset(train, out / TRAIN_CSV)
        save_dataset(test, out / TEST_CSV)
    train = load_dataset(out / TRAIN_CSV)
    test = load_dataset(out / TEST_CSV)
    if test.n_classes != train.n_classes or test.dim != train.dim:
        raise UsageError("train and test sets disagree on classes or dimension")
    return train, test


def _as_clean(ds: NoisyDataset) -> CleanDataset:
    return CleanDataset(ds.features, ds.given_labels, ds.n_classes, ds.radius)


def cmd_gen(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    train, test = generate(cfg)
    save_dataset(train, out / TRAIN_CSV)
    save_dataset(test, out / TEST_CSV)
    log.info("wrote %d training and %d test samples to %s", len(train), len(test), out)
    return EXIT_OK


def cmd_run(cfg: ExperimentConfig, args) -> int:
    if cfg.run.baseline:
        return cmd_baseline(cfg, args)
    out = _out_dir(cfg)
    train, test = _datasets(cfg, out)
    evaluator = Evaluator(_as_clean(test), train.truth)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as stream:
        result = run_full(cfg.pipeline, train.training_view(), evaluator, out, stream)
    for state in result.rounds:
        if state.split is not None:
            write_selection_csv(out / f"selection_round_{state.round}.csv", state.ood_scores.scores,
                                state.split.losses, state.split, state.ood_mask)
    final = result.history[-1].test_acc if result.history else None
    log.info("run finished; final test accuracy %s", "n/a" if final is None else f"{final:.4f}")
    return EXIT_OK


def cmd_baseline(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    train, test = _datasets(cfg, out)
    evaluator = Evaluator(_as_clean(test), None)
    with open(out / "baseline_metrics.jsonl", "w", encoding="utf-8") as stream:
        try:
            result = run_baseline(cfg.pipeline, train.training_view(), evaluator, stream)
        except DivergenceError as exc:
            raise PipelineAbort(str(exc)) from exc
    final = result.history[-1].test_acc if result.history else None
    log.info("baseline finished; final test accuracy %s", "n/a" if final is None else f"{final:.4f}")
    return EXIT_OK


def _checkpoint(path):
    try:
        return load_checkpoint(_resolve(path))
    except (KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: malformed checkpoint header ({exc})") from None


def cmd_select(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    train, _ = _datasets(cfg, out)
    model, _, meta = _checkpoint(args.checkpoint)
    data = train.training_view()
    # reuse the exclusion set stored with the checkpoint; otherwise apply the first-round fraction
    previous = np.zeros(len(data), dtype=bool)
    excluded = meta.get("ood_excluded")
    if excluded is not None:
        previous[np.asarray(excluded, dtype=np.int64)] = True
    mask, scores = select_ood(model, data, cfg.pipeline, 0 if excluded is None else 1, previous)
    if excluded is not None:
        mask = previous
    split = fit_split(model, data, mask, cfg.pipeline)
    target = out / "selection.csv"
    write_selection_csv(target, scores.scores, split.losses, split, mask)
    log.info("wrote %s (%d ood, %d clean, %d noisy)", target, int(mask.sum()),
             split.clean_indices.shape[0], split.noisy_indices.shape[0])
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    model, _, meta = _checkpoint(args.checkpoint)
    test = load_dataset(_resolve(args.test))
    if test.dim != model.arch.in_dim or test.n_classes != model.arch.n_classes:
        raise UsageError("test set does not match the checkpoint's input width or class count")
    acc = accuracy(model, _as_clean(test))
    record = {"checkpoint": str(args.checkpoint), "test": str(args.test), "n": len(test), "accuracy": acc}
    if "round" in meta:
        record["round"] = meta["round"]
    print(f"accuracy {acc:.6f}")
    out = _out_dir(cfg)
    (out / "eval.json").write_text(json.dumps(record, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "run": cmd_run, "baseline": cmd_baseline, "select": cmd_select, "eval": cmd_eval}


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (INI)")
    common.add_argument("--out", help="output directory, relative to the workspace")
    common.add_argument("--seed", type=_u64, help="override the config seed")
    common.add_argument("--quiet", action="store_true", help="only print warnings and errors")

    parser = argparse.ArgumentParser(prog="mdmx", description="Noisy-label training on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="write train.csv and test.csv")
    sub.add_parser("run", parents=[common], help="full pipeline; metrics.jsonl and per-round checkpoints")
    sub.add_parser("baseline", parents=[common], help="cross-entropy baseline; baseline_metrics.jsonl")
    p = sub.add_parser("select", parents=[common], help="dump OOD scores and clean posteriors for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("eval", parents=[common], help="test accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True, help="test set CSV")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; report them as validation errors
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = effective_config(args)
        return COMMANDS[args.command](cfg, args)
    except PipelineAbort as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, DatasetFormatError, MetricsFormatError, UsageError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
