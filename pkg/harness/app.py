"""harness.app

Command-line entrypoint: dataset synthesis, training, cross-validation,
reports and the numerical self-checks.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from harness.config import HarnessSettings, load_settings
from harness.crossval import (
    CONFIG_DOCUMENT,
    CrossvalResult,
    run_crossval,
    run_single_split,
)
from harness.dataset import load_cases, prepare_case
from harness.figures import emit_activation_histogram
from harness.reports import build_report, load_run
from harness.repository import CsvResultsRepository
from harness.synth import synth_dataset
from harness.validation import gradient_suite, selfnorm_check
from sunet.models import ARCHITECTURES, PRESETS, ExperimentConfig, build_experiment_config

HISTOGRAM_IMAGES = 4


def _experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides: dict = {}
    if args.config is not None:
        if not args.config.exists():
            raise FileNotFoundError(f"config file not found: {args.config}")
        overrides = json.loads(args.config.read_text(encoding="utf-8"))
        if not isinstance(overrides, dict):
            raise ValueError(f"{args.config}: config must be a JSON object")
    if args.seed is not None:
        overrides.setdefault("train", {})["seed"] = args.seed
    return build_experiment_config(args.preset, overrides, args.arch)


def _out_dir(args: argparse.Namespace, settings: HarnessSettings) -> Path:
    return args.out_dir if args.out_dir is not None else settings.out_dir


def _cmd_synth(args: argparse.Namespace, settings: HarnessSettings) -> int:
    synth_dataset(
        _out_dir(args, settings),
        n_patients=args.patients,
        images_per_patient=args.images_per_patient,
        seed=0 if args.seed is None else args.seed,
        size=tuple(args.size),
    )
    return 0


def _exit_code(result: CrossvalResult) -> int:
    # Tables are already written for the surviving folds.
    if result.failed:
        holdouts = ", ".join(f.holdout for f in result.failed)
        raise RuntimeError(f"{len(result.failed)} fold(s) diverged (holdout {holdouts})")
    return 0


def _cmd_train(args: argparse.Namespace, settings: HarnessSettings) -> int:
    config = _experiment_config(args)
    repository = CsvResultsRepository(_out_dir(args, settings))
    result = run_single_split(
        load_cases(args.manifest), config, repository, holdout=args.holdout
    )
    return _exit_code(result)


def _cmd_crossval(args: argparse.Namespace, settings: HarnessSettings) -> int:
    config = _experiment_config(args)
    repository = CsvResultsRepository(_out_dir(args, settings))
    workers = args.workers if args.workers is not None else settings.workers
    result = run_crossval(load_cases(args.manifest), config, repository, workers=workers)
    return _exit_code(result)


def _run_label(spec: str) -> tuple[str, Path]:
    # "label=path" or a bare path labeled by its directory name.
    label, sep, path = spec.partition("=")
    return (label, Path(path)) if sep else (Path(spec).name, Path(spec))


def _cmd_report(args: argparse.Namespace, settings: HarnessSettings) -> int:
    runs = [
        load_run(label, CsvResultsRepository(path))
        for label, path in map(_run_label, args.runs)
    ]
    build_report(runs, CsvResultsRepository(_out_dir(args, settings)))
    return 0


def _cmd_histogram(args: argparse.Namespace, settings: HarnessSettings) -> int:
    config_path = args.run_dir / CONFIG_DOCUMENT
    if not config_path.exists():
        raise FileNotFoundError(f"run config not found: {config_path}")
    config = ExperimentConfig.model_validate_json(config_path.read_text(encoding="utf-8"))
    iterations = args.iterations or [
        step
        for step in config.train.checkpoint_iterations
        if 0 < step <= config.train.iterations
    ]
    cases = load_cases(args.manifest)[:HISTOGRAM_IMAGES]
    batch = np.stack(
        [prepare_case(c, config.canvas, config.network_size).network_image for c in cases]
    )[:, None, :, :]
    emit_activation_histogram(CsvResultsRepository(args.run_dir), args.fold, iterations, batch)
    return 0


def _cmd_selfnorm(args: argparse.Namespace, settings: HarnessSettings) -> int:
    report = selfnorm_check(args.depth, args.width, args.samples, seed=args.seed or 0)
    print("layer,selu_mean,selu_variance,relu_mean,relu_variance")
    for selu_layer, relu_layer in zip(report.selu, report.relu, strict=True):
        print(
            f"{selu_layer.layer},{selu_layer.mean:.6g},{selu_layer.variance:.6g},"
            f"{relu_layer.mean:.6g},{relu_layer.variance:.6g}"
        )
    if not report.selu_stable:
        raise RuntimeError("SELU chain left the self-normalizing band")
    if not report.relu_leaves_band:
        logging.warning("ReLU contrast chain stayed inside the band")
    return 0


def _cmd_grad_check(args: argparse.Namespace, settings: HarnessSettings) -> int:
    results = gradient_suite(seed=args.seed or 0)
    print("check,max_relative_error,passed")
    for result in results:
        print(f"{result.name},{result.max_relative_error:.3g},{int(result.passed)}")
    failed = [result.name for result in results if not result.passed]
    if failed:
        raise RuntimeError(f"gradient checks failed: {', '.join(failed)}")
    return 0


def _experiment_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", type=Path, required=True)
    parser.add_argument("--config", type=Path, help="JSON overrides of the experiment config")
    parser.add_argument("--arch", choices=sorted(ARCHITECTURES), default="sunet")
    parser.add_argument("--preset", choices=sorted(PRESETS), default="full")


def build_parser() -> argparse.ArgumentParser:
    """Top-level parser with one subcommand per task."""
    parser = argparse.ArgumentParser(
        prog="sunet", description="Self-normalising U-Net segmentation experiments"
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", type=Path)
    common.add_argument("--seed", type=int)
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", parents=[common], help="generate a phantom dataset")
    synth.add_argument("--patients", type=int, default=8)
    synth.add_argument("--images-per-patient", type=int, default=3)
    synth.add_argument("--size", type=int, nargs=2, default=[64, 64], metavar=("H", "W"))
    synth.set_defaults(handler=_cmd_synth)

    train = commands.add_parser("train", parents=[common], help="train and score one split")
    _experiment_flags(train)
    train.add_argument("--holdout", help="held-out patient id (default: first patient)")
    train.set_defaults(handler=_cmd_train)

    crossval = commands.add_parser(
        "crossval", parents=[common], help="leave-one-patient-out cross-validation"
    )
    _experiment_flags(crossval)
    crossval.add_argument("--workers", type=int)
    crossval.set_defaults(handler=_cmd_crossval)

    report = commands.add_parser("report", parents=[common], help="summary tables")
    report.add_argument("runs", nargs="+", help="run directories, optionally label=path")
    report.set_defaults(handler=_cmd_report)

    histogram = commands.add_parser(
        "histogram", parents=[common], help="last-block activation histograms"
    )
    histogram.add_argument("--run-dir", type=Path, required=True)
    histogram.add_argument("--manifest", type=Path, required=True)
    histogram.add_argument("--fold", type=int, default=0)
    histogram.add_argument("--iterations", type=int, nargs="*")
    histogram.set_defaults(handler=_cmd_histogram)

    selfnorm = commands.add_parser(
        "selfnorm-check", parents=[common], help="SELU moment propagation check"
    )
    selfnorm.add_argument("--depth", type=int, default=20)
    selfnorm.add_argument("--width", type=int, default=128)
    selfnorm.add_argument("--samples", type=int, default=100_000)
    selfnorm.set_defaults(handler=_cmd_selfnorm)

    grad = commands.add_parser(
        "grad-check", parents=[common], help="numerical gradient validation suite"
    )
    grad.set_defaults(handler=_cmd_grad_check)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand; 0 on success, 1 on failure, 2 on usage errors."""
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings()
        logging.basicConfig(level=settings.log_level)
        return args.handler(args, settings)
    except (ValueError, RuntimeError, OSError) as exc:
        message = " ".join(str(exc).split())
        print(f"sunet {args.command}: {message}", file=sys.stderr)
        return 1
