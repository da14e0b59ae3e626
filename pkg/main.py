import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from dotenv import load_dotenv

from config import RunConfig, build_run_config, describe_config
from data import DatasetManifest, export_dataset, load_image_dir, synth_textures
from encoding import FUSIONS
from errors import ConfigurationError, DataError, MulterError, UsageError
from events import EventEmitter
from gradcheck import SEED_COUNT, SUITES, TOLERANCE, run_suites
from network import load_model, save_model, trace_shapes
from training import EpochMetrics, evaluate, init_model, train, write_metrics_csv
from utils import format_levels, parse_levels

load_dotenv()

# Level-selection schemes compared by the ablation, in report order
SCHEMES: tuple[tuple[int, ...], ...] = (
    (1,),
    (2,),
    (3,),
    (4,),
    (1, 2),
    (3, 4),
    (1, 4),
    (1, 2, 3),
    (2, 3, 4),
    (1, 2, 3, 4),
)

MODEL_FILE = "model.npz"
METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.txt"
ABLATION_FILE = "ablation.csv"
ABLATION_SUMMARY_FILE = "ablation_summary.txt"


def _configure_logging():
    logging.basicConfig(
        level=os.getenv("MULTER_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(message)s",
    )


def _levels_arg(value: str) -> tuple[int, ...]:
    try:
        return parse_levels(value)
    except ConfigurationError as e:
        raise argparse.ArgumentTypeError(str(e))


def _add_run_options(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="flat key=value file; flags override it")
    parser.add_argument("--data", help="'synth' or a dataset root with train/ and test/")
    parser.add_argument("--levels", type=_levels_arg, help="stage levels, e.g. 1,2,3,4")
    parser.add_argument("--k", type=int, help="codewords per encoding module")
    parser.add_argument("--c", type=int, help="output width per encoding module")
    parser.add_argument("--branch-dim", type=int)
    parser.add_argument("--fusion", choices=FUSIONS)
    parser.add_argument("--widths", help="comma-separated stage widths")
    parser.add_argument("--stem-channels", type=int)
    parser.add_argument("--full-size", action="store_const", const=True, default=None)
    parser.add_argument("--classes", type=int, help="synthetic class count")
    parser.add_argument("--per-class", type=int, help="synthetic train images per class")
    parser.add_argument("--test-per-class", type=int, help="synthetic test images per class")
    parser.add_argument(
        "--size",
        type=int,
        help="synthetic image size; stage i has extent ceil(size / 2^(i+1)), exact for multiples of 32",
    )
    parser.add_argument("--lr", type=float)
    parser.add_argument("--momentum", type=float)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch", type=int)
    parser.add_argument("--decay-every", type=int)
    parser.add_argument("--decay-factor", type=float)
    parser.add_argument("--resize", type=int)
    parser.add_argument("--crop", type=int)
    parser.add_argument("--flip-prob", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--output-dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multer", description="Multi-level texture encoding network"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    _add_run_options(commands.add_parser("train", help="train a model"))

    eval_parser = commands.add_parser("eval", help="evaluate a saved model")
    _add_run_options(eval_parser)
    eval_parser.add_argument("--model", help=f"model file (default <output-dir>/{MODEL_FILE})")

    ablate_parser = commands.add_parser("ablate", help="compare level-selection schemes")
    _add_run_options(ablate_parser)
    ablate_parser.add_argument("--seeds", type=int, help="training seeds per scheme")

    synth_parser = commands.add_parser("synth", help="export the synthetic dataset as PNG files")
    _add_run_options(synth_parser)

    grad_parser = commands.add_parser("gradcheck", help="run the finite-difference gradient suites")
    grad_parser.add_argument("--suites", help=f"comma-separated subset of: {', '.join(SUITES)}")
    grad_parser.add_argument("--seeds", type=int, default=SEED_COUNT, help="random seeds per suite")
    return parser


def _run_config(args: argparse.Namespace) -> RunConfig:
    flags = {key: val for key, val in vars(args).items() if key not in ("command", "config")}
    run = build_run_config(args.command, flags, args.config)
    logging.debug(f"Effective configuration: {json.dumps(describe_config(run), sort_keys=True)}")
    return run


def _load_dataset(run: RunConfig) -> tuple[DatasetManifest, RunConfig]:
    """Load the configured dataset and size the classifier to its classes."""
    if run.is_synth:
        dataset = synth_textures(
            classes=run.synth.classes,
            per_class=run.synth.per_class,
            size=run.synth.size,
            seed=run.training.seed,
            test_per_class=run.synth.test_per_class,
        )
    else:
        dataset = load_image_dir(run.data)
    model = dataclasses.replace(run.model, num_classes=dataset.num_classes)
    return dataset, dataclasses.replace(run, model=model)


def _log_epoch(metrics: EpochMetrics):
    logging.info(
        f"Epoch {metrics.epoch}: lr={metrics.lr:.6g} loss={metrics.train_loss:.4f} "
        f"train_acc={metrics.train_acc:.4f} eval_acc={metrics.eval_acc:.4f}"
    )


def _log_step(epoch: int, step: int, loss: float):
    logging.debug(f"Epoch {epoch} step {step}: loss={loss:.6f}")


def cmd_train(run: RunConfig) -> int:
    dataset, run = _load_dataset(run)
    cfg = run.training
    logging.debug(
        f"Network shapes at {cfg.crop_size}px: {trace_shapes(run.model, cfg.crop_size)}"
    )

    events = EventEmitter()
    events.on("epoch_end", _log_epoch)
    events.on("step_end", _log_step)

    model = init_model(run.model, dataset.class_names, cfg.seed)
    model, history = train(model, dataset, cfg, events)

    if history:
        final_acc = history[-1].eval_acc
    elif dataset.test:
        final_acc = evaluate(model, dataset.test, cfg.preprocess(), cfg.batch_size)
    else:
        final_acc = float("nan")

    out = run.output_dir
    save_model(model, out / MODEL_FILE)
    write_metrics_csv(history, out / METRICS_FILE)
    summary = [
        f"levels={format_levels(run.model.levels)}",
        f"fusion={run.model.fusion}",
        f"epochs={cfg.epochs}",
        f"seed={cfg.seed}",
        f"classes={dataset.num_classes}",
        f"train_images={len(dataset.train)}",
        f"test_images={len(dataset.test)}",
        f"final_train_loss={history[-1].train_loss:.6f}" if history else "final_train_loss=nan",
        f"accuracy={final_acc:.4f}",
    ]
    (out / SUMMARY_FILE).write_text("\n".join(summary) + "\n")
    logging.info(f"Training finished: accuracy={final_acc:.4f}, outputs in {out}")
    print(f"accuracy={final_acc:.4f}")
    return 0


def cmd_eval(run: RunConfig) -> int:
    path = run.model_path or run.output_dir / MODEL_FILE
    model = load_model(path)
    dataset, run = _load_dataset(run)
    if dataset.num_classes != model.config.num_classes:
        raise DataError(
            f"model {path} has {model.config.num_classes} classes, dataset has {dataset.num_classes}"
        )
    if not dataset.test:
        raise DataError("dataset has no test images to evaluate")
    accuracy = evaluate(model, dataset.test, run.training.preprocess(), run.training.batch_size)
    print(f"accuracy={accuracy:.4f}")
    return 0


def _write_ablation(rows: list[tuple[str, list[float]]], seeds: list[int], path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        header = ["scheme", "accuracy"]
        if len(seeds) > 1:
            header += [f"seed_{seed}" for seed in seeds]
        writer.writerow(header)
        for scheme, accuracies in rows:
            row = [scheme, f"{float(np.mean(accuracies)):.6f}"]
            if len(seeds) > 1:
                row += [f"{acc:.6f}" for acc in accuracies]
            writer.writerow(row)


def summarize_ablation(means: dict[str, float]) -> list[str]:
    """Best and runner-up schemes, the high- vs low-level gap and the multi-level check."""
    ranked = sorted(means.items(), key=lambda item: -item[1])
    singles = {scheme: acc for scheme, acc in means.items() if "," not in scheme}
    lines = [f"best={ranked[0][0]} accuracy={ranked[0][1]:.4f}"]
    if len(ranked) > 1:
        lines.append(f"runner_up={ranked[1][0]} accuracy={ranked[1][1]:.4f}")
    if "L=1" in means and "L=4" in means:
        lines.append(f"gap_L4_minus_L1={means['L=4'] - means['L=1']:+.4f}")
    all_levels = format_levels((1, 2, 3, 4))
    if singles and all_levels in means:
        best_single = max(singles, key=singles.get)
        verdict = "yes" if means[all_levels] >= singles[best_single] else "no"
        lines.append(f"best_single={best_single} accuracy={singles[best_single]:.4f}")
        lines.append(f"multi_level_at_least_best_single={verdict}")
    return lines


def cmd_ablate(run: RunConfig) -> int:
    dataset, run = _load_dataset(run)
    seeds = [run.training.seed + offset for offset in range(run.seeds)]
    rows: list[tuple[str, list[float]]] = []

    for levels in SCHEMES:
        scheme = format_levels(levels)
        model_config = dataclasses.replace(run.model, levels=levels)
        accuracies = []
        for seed in seeds:
            cfg = dataclasses.replace(run.training, seed=seed)
            model = init_model(model_config, dataset.class_names, seed)
            model, history = train(model, dataset, cfg)
            if history:
                accuracy = history[-1].eval_acc
            else:
                accuracy = evaluate(model, dataset.test, cfg.preprocess(), cfg.batch_size)
            accuracies.append(accuracy)
            logging.info(f"Scheme {scheme} seed {seed}: accuracy={accuracy:.4f}")
        rows.append((scheme, accuracies))

    _write_ablation(rows, seeds, run.output_dir / ABLATION_FILE)
    means = {scheme: float(np.mean(accs)) for scheme, accs in rows}
    summary = summarize_ablation(means)
    (run.output_dir / ABLATION_SUMMARY_FILE).write_text("\n".join(summary) + "\n")
    for line in summary:
        logging.info(f"Ablation: {line}")

    print(f"{'scheme':<14}accuracy")
    for scheme, accuracy in means.items():
        print(f"{scheme:<14}{accuracy:.4f}")
    return 0


def cmd_synth(run: RunConfig) -> int:
    if not run.is_synth:
        raise UsageError("synth export needs --data synth")
    dataset, _ = _load_dataset(run)
    written = export_dataset(dataset, run.output_dir)
    print(f"images={written}")
    return 0


def cmd_gradcheck(suites: str | None, seeds: int) -> int:
    names = [name.strip() for name in suites.split(",") if name.strip()] if suites else None
    unknown = sorted(set(names or []) - set(SUITES))
    if unknown:
        raise UsageError(f"unknown gradient suites: {', '.join(unknown)}")
    if seeds < 1:
        raise ConfigurationError("seeds must be positive")

    results = run_suites(names, range(seeds))
    print(f"{'suite':<22}{'max_rel_error':>14}{'checked':>9}{'skipped':>9}  status")
    for result in results:
        status = "ok" if result.passed else "FAIL"
        print(
            f"{result.suite:<22}{result.max_error:>14.3e}{result.checked:>9}{result.skipped:>9}  {status}"
        )
    failed = [result.suite for result in results if not result.passed]
    if failed:
        logging.error(f"Gradient check failed (tolerance {TOLERANCE}): {', '.join(failed)}")
        return 1
    logging.info(f"All {len(results)} gradient suites passed in {sum(r.seconds for r in results):.1f}s")
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)

    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.suites, args.seeds)
        run = _run_config(args)
        if args.command == "train":
            return cmd_train(run)
        if args.command == "eval":
            return cmd_eval(run)
        if args.command == "ablate":
            return cmd_ablate(run)
        return cmd_synth(run)
    except (MulterError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        logging.debug(f"Command {args.command} failed", exc_info=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
