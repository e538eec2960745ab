"""harness.crossval

Leave-one-patient-out cross-validation: fold planning, per-fold training with
augmented mini-batches, prediction on the held-out patient, post-processing
and pairwise metric rows. Folds are independent and run on a thread pool.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Generic, Protocol, TypeVar

import numpy as np

from harness.dataset import LabeledCase, PreparedCase, prepare_case
from harness.figures import average_curves, checkpoint_name, select_percentile_cases
from harness.repository import ResultsRepository
from sunet.imageops import BinaryMask, GrayImage, post_process, random_affine, resize_nearest
from sunet.metrics import MetricsRecord, compare_masks
from sunet.models import ExperimentConfig
from sunet.network import (
    AdamState,
    Network,
    TrainingDivergedError,
    build_network,
    predict_masks,
    train_step,
)
from sunet.stats import COMPUTER_RATER, OPERATOR_PAIRS, OPERATORS

METRICS_TABLE = "metrics.csv"
INTEROBSERVER_TABLE = "interobserver.csv"
CURVES_TABLE = "curves.csv"
CURVES_MEAN_TABLE = "curves_mean.csv"
DICE_CURVE_TABLE = "dice_curve.csv"
PERCENTILE_TABLE = "percentile_cases.csv"
FAILED_FOLDS_TABLE = "failed_folds.csv"
CONFIG_DOCUMENT = "config.json"


class HasPatient(Protocol):
    @property
    def patient_id(self) -> str: ...


CaseT = TypeVar("CaseT", bound=HasPatient)


@dataclass(frozen=True)
class Fold(Generic[CaseT]):
    index: int
    holdout: str
    train: tuple[CaseT, ...]
    test: tuple[CaseT, ...]


@dataclass(frozen=True)
class FoldPlan(Generic[CaseT]):
    folds: tuple[Fold[CaseT], ...]

    def __len__(self) -> int:
        return len(self.folds)

    def fold_for(self, patient_id: str) -> Fold[CaseT]:
        for fold in self.folds:
            if fold.holdout == patient_id:
                return fold
        raise ValueError(f"no fold holds out patient {patient_id!r}")


def plan_lopo(cases: Sequence[CaseT]) -> FoldPlan[CaseT]:
    """One fold per patient, in sorted patient-id order; input order is kept inside folds."""
    patients = sorted({case.patient_id for case in cases})
    if len(patients) < 2:
        raise ValueError(
            f"leave-one-patient-out needs at least 2 patients, got {len(patients)}"
        )
    folds = tuple(
        Fold(
            index=index,
            holdout=patient,
            train=tuple(case for case in cases if case.patient_id != patient),
            test=tuple(case for case in cases if case.patient_id == patient),
        )
        for index, patient in enumerate(patients)
    )
    return FoldPlan(folds)


@dataclass
class FoldStreams:
    """Independent generators of one fold, derived from (seed, fold index)."""

    init: np.random.Generator
    sample: np.random.Generator
    augment: np.random.Generator
    dropout: np.random.Generator

    @classmethod
    def for_fold(cls, seed: int, fold_index: int) -> FoldStreams:
        children = np.random.SeedSequence([seed, fold_index]).spawn(4)
        return cls(*(np.random.default_rng(child) for child in children))


class BatchSampler:
    """Draws mini-batches by walking through shuffled epochs of the samples."""

    def __init__(self, n_samples: int, batch_size: int, rng: np.random.Generator) -> None:
        if n_samples < 1:
            raise ValueError("BatchSampler needs at least one sample")
        self.n_samples = n_samples
        self.batch_size = batch_size
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._position = 0

    def next_batch(self) -> np.ndarray:
        picked = []
        while len(picked) < self.batch_size:
            if self._position >= self._order.size:
                self._order = self.rng.permutation(self.n_samples)
                self._position = 0
            take = min(self.batch_size - len(picked), self._order.size - self._position)
            picked.extend(self._order[self._position : self._position + take])
            self._position += take
        return np.asarray(picked, dtype=np.int64)


@dataclass
class FoldResult:
    fold: int
    holdout: str
    records: list[MetricsRecord]
    losses: list[tuple[int, float]]
    dice_curve: list[tuple[int, str, str, float]] = field(default_factory=list)


@dataclass(frozen=True)
class FailedFold:
    fold: int
    holdout: str
    reason: str


def _training_samples(prepared: Sequence[PreparedCase]) -> list[tuple[int, int]]:
    # One sample per (image, operator mask).
    return [(case, operator) for case in range(len(prepared)) for operator in range(3)]


def _make_batch(
    prepared: Sequence[PreparedCase],
    samples: Sequence[tuple[int, int]],
    indices: np.ndarray,
    config: ExperimentConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    images, masks = [], []
    for index in indices:
        case_index, operator = samples[index]
        image = prepared[case_index].network_image
        mask = prepared[case_index].network_masks[operator]
        if config.train.augment:
            warped_image, warped_mask = random_affine(
                GrayImage(image), BinaryMask(mask), config.train.affine, rng
            )
            image, mask = warped_image.values, warped_mask.values
        images.append(image)
        masks.append(mask)
    return np.stack(images)[:, None, :, :], np.stack(masks).astype(np.float64)


def predict_case_masks(
    net: Network, prepared: Sequence[PreparedCase]
) -> list[BinaryMask]:
    """Predict on the network grid, resize to the canvas and post-process."""
    if not prepared:
        return []
    images = np.stack([case.network_image for case in prepared])[:, None, :, :]
    raw = predict_masks(net, images)
    masks = []
    for values, case in zip(raw, prepared, strict=True):
        canvas_mask = case.canvas_masks[0]
        predicted = BinaryMask(values)
        if values.shape != case.canvas_shape:
            predicted = resize_nearest(predicted, case.canvas_shape)
        masks.append(post_process(BinaryMask(predicted.values, canvas_mask.spacing)))
    return masks


def evaluate_fold(
    net: Network, prepared: Sequence[PreparedCase], warn_empty: bool = True
) -> list[MetricsRecord]:
    """Compare each post-processed prediction with the three operator masks."""
    records = []
    for case, predicted in zip(prepared, predict_case_masks(net, prepared), strict=True):
        if warn_empty and predicted.is_empty():
            logging.warning(f"Empty prediction for image {case.case.image_id}")
        for operator, manual in zip(OPERATORS, case.canvas_masks, strict=True):
            records.append(
                compare_masks(
                    predicted,
                    manual,
                    patient=case.case.patient_id,
                    image=case.case.image_id,
                    stage=case.case.stage,
                    rater_a=COMPUTER_RATER,
                    rater_b=operator,
                )
            )
    return records


def _dice_rows(
    step: int, net: Network, prepared: Sequence[PreparedCase]
) -> list[tuple[int, str, str, float]]:
    return [
        (step, record.image, record.rater_b, record.dice)
        for record in evaluate_fold(net, prepared, warn_empty=False)
    ]


def run_fold(
    fold: Fold[LabeledCase],
    config: ExperimentConfig,
    repository: ResultsRepository | None = None,
    track_dice: bool = False,
) -> FoldResult:
    """Train one network on the fold's training patients and score the held-out one."""
    train_cfg = config.train
    streams = FoldStreams.for_fold(train_cfg.seed, fold.index)
    train_cases = [prepare_case(c, config.canvas, config.network_size) for c in fold.train]
    test_cases = [prepare_case(c, config.canvas, config.network_size) for c in fold.test]

    net = build_network(config.network, streams.init)
    adam = AdamState.for_parameters(
        net.parameter_list(),
        lr=train_cfg.learning_rate,
        beta1=train_cfg.beta1,
        beta2=train_cfg.beta2,
        epsilon=train_cfg.adam_epsilon,
    )
    samples = _training_samples(train_cases)
    sampler = BatchSampler(len(samples), train_cfg.batch_size, streams.sample)
    checkpoints = {
        step for step in train_cfg.checkpoint_iterations if 0 < step <= train_cfg.iterations
    }
    track_dice = track_dice and train_cfg.eval_every > 0

    logging.info(
        f"Fold {fold.index} (holdout {fold.holdout}): {len(fold.train)} training images, "
        f"{len(fold.test)} test images, {net.parameter_count()} parameters"
    )
    losses: list[tuple[int, float]] = []
    dice_curve = _dice_rows(0, net, test_cases) if track_dice else []
    for step in range(1, train_cfg.iterations + 1):
        batch = _make_batch(
            train_cases, samples, sampler.next_batch(), config, streams.augment
        )
        try:
            loss = train_step(net, batch, config.loss, adam, streams.dropout)
        except TrainingDivergedError as exc:
            logging.error(f"Fold {fold.index} (holdout {fold.holdout}) diverged: {exc}")
            raise
        losses.append((step, loss))
        if step % train_cfg.log_every == 0:
            logging.info(f"Fold {fold.index} step {step}: loss {loss:.6g}")
        if repository is not None and step in checkpoints:
            repository.save_network(checkpoint_name(fold.index, step), net, step)
        if track_dice and step % train_cfg.eval_every == 0:
            dice_curve.extend(_dice_rows(step, net, test_cases))

    records = evaluate_fold(net, test_cases)
    logging.info(f"Fold {fold.index} (holdout {fold.holdout}) finished")
    return FoldResult(fold.index, fold.holdout, records, losses, dice_curve)


def interobserver_rows(
    cases: Iterable[LabeledCase], canvas: tuple[int, int]
) -> list[MetricsRecord]:
    """Operator-pair comparisons on the same canvas grid as the predictions."""
    records = []
    for case in cases:
        masks = {
            operator: prepare_case(case, canvas, canvas).canvas_masks[index]
            for index, operator in enumerate(OPERATORS)
        }
        for rater_a, rater_b in OPERATOR_PAIRS:
            records.append(
                compare_masks(
                    masks[rater_a],
                    masks[rater_b],
                    patient=case.patient_id,
                    image=case.image_id,
                    stage=case.stage,
                    rater_a=rater_a,
                    rater_b=rater_b,
                )
            )
    return records


@dataclass
class CrossvalResult:
    folds: list[FoldResult]
    interobserver: list[MetricsRecord]
    failed: list[FailedFold] = field(default_factory=list)

    @property
    def records(self) -> list[MetricsRecord]:
        return [record for fold in self.folds for record in fold.records]


def write_results(
    result: CrossvalResult, config: ExperimentConfig, repository: ResultsRepository
) -> None:
    """Write config, metric rows, curves, percentile cases and failed folds."""
    columns = MetricsRecord.columns()
    repository.write_json(CONFIG_DOCUMENT, config.model_dump(mode="json"))
    repository.write_table(METRICS_TABLE, columns, (r.as_row() for r in result.records))
    repository.write_table(
        INTEROBSERVER_TABLE, columns, (r.as_row() for r in result.interobserver)
    )
    curves = [(fold.fold, step, loss) for fold in result.folds for step, loss in fold.losses]
    repository.write_table(CURVES_TABLE, ("fold", "iteration", "loss"), curves)
    repository.write_table(
        CURVES_MEAN_TABLE, ("iteration", "mean_loss", "sd_loss", "folds"), average_curves(curves)
    )
    tracked = [row for fold in result.folds for row in fold.dice_curve]
    repository.write_table(DICE_CURVE_TABLE, ("iteration", "image", "rater", "dice"), tracked)
    repository.write_table(
        PERCENTILE_TABLE,
        ("label", "patient", "image", "stage", "mean_dice"),
        select_percentile_cases(result.records),
    )
    repository.write_table(
        FAILED_FOLDS_TABLE,
        ("fold", "holdout", "reason"),
        ((f.fold, f.holdout, f.reason) for f in result.failed),
    )


def _run_plan(
    folds: Sequence[Fold[LabeledCase]],
    config: ExperimentConfig,
    repository: ResultsRepository,
    workers: int,
) -> tuple[list[FoldResult], list[FailedFold]]:
    first = folds[0].index

    def run(fold: Fold[LabeledCase]) -> FoldResult | FailedFold:
        try:
            return run_fold(fold, config, repository, track_dice=fold.index == first)
        except TrainingDivergedError as exc:
            return FailedFold(fold.index, fold.holdout, str(exc))

    if workers <= 1:
        outcomes = [run(fold) for fold in folds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            outcomes = list(executor.map(run, folds))
    finished = [o for o in outcomes if isinstance(o, FoldResult)]
    failed = [o for o in outcomes if isinstance(o, FailedFold)]
    if failed:
        logging.warning(
            f"{len(failed)} of {len(folds)} folds diverged: "
            f"{', '.join(f.holdout for f in failed)}"
        )
    return finished, failed


def run_crossval(
    cases: Sequence[LabeledCase],
    config: ExperimentConfig,
    repository: ResultsRepository,
    workers: int = 1,
) -> CrossvalResult:
    """Full leave-one-patient-out run; writes every table through ``repository``.

    A diverged fold is recorded in ``failed`` and the remaining folds are kept.
    """
    plan = plan_lopo(cases)
    logging.info(f"Cross-validation over {len(plan)} folds, {len(cases)} images")
    finished, failed = _run_plan(plan.folds, config, repository, workers)
    result = CrossvalResult(
        folds=finished,
        interobserver=interobserver_rows(cases, config.canvas),
        failed=failed,
    )
    write_results(result, config, repository)
    return result


def run_single_split(
    cases: Sequence[LabeledCase],
    config: ExperimentConfig,
    repository: ResultsRepository,
    holdout: str | None = None,
) -> CrossvalResult:
    """Train and score the single fold holding out ``holdout`` (default: first patient)."""
    plan = plan_lopo(cases)
    fold = plan.folds[0] if holdout is None else plan.fold_for(holdout)
    finished, failed = _run_plan([fold], config, repository, workers=1)
    result = CrossvalResult(
        folds=finished,
        interobserver=interobserver_rows(fold.test, config.canvas),
        failed=failed,
    )
    write_results(result, config, repository)
    return result
