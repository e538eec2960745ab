"""tests.test_crossval

Fold planning, batch sampling and a tiny end-to-end leave-one-patient-out run.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pytest

from harness.crossval import (
    CONFIG_DOCUMENT,
    CURVES_MEAN_TABLE,
    CURVES_TABLE,
    DICE_CURVE_TABLE,
    FAILED_FOLDS_TABLE,
    INTEROBSERVER_TABLE,
    METRICS_TABLE,
    PERCENTILE_TABLE,
    BatchSampler,
    FoldStreams,
    plan_lopo,
    run_crossval,
    run_single_split,
)
from harness.dataset import LabeledCase, load_cases
from harness.figures import checkpoint_name, emit_activation_histogram, histogram_table_name
from harness.synth import synth_dataset
from sunet.metrics import MetricsRecord
from sunet.models import ExperimentConfig, build_experiment_config
from sunet.network import TrainingDivergedError, train_step


@dataclass(frozen=True)
class Image:
    patient_id: str
    image_id: str


def _images(counts: list[int]) -> list[Image]:
    return [
        Image(f"P{p:02d}", f"P{p:02d}_{i}")
        for p, count in enumerate(counts, start=1)
        for i in range(count)
    ]


def test_plan_lopo_full_cohort() -> None:
    counts = [3] * 21 + [2] * 14
    images = _images(counts)
    assert len(images) == 91
    plan = plan_lopo(images)
    assert len(plan) == 35
    assert sum(len(fold.test) for fold in plan.folds) == 91
    tested = [image for fold in plan.folds for image in fold.test]
    assert sorted(tested, key=lambda image: image.image_id) == sorted(
        images, key=lambda image: image.image_id
    )


def test_plan_lopo_has_no_patient_leakage() -> None:
    plan = plan_lopo(_images([2, 3, 1, 4]))
    for fold in plan.folds:
        assert {image.patient_id for image in fold.test} == {fold.holdout}
        assert fold.holdout not in {image.patient_id for image in fold.train}
        assert len(fold.train) + len(fold.test) == 10
    assert [fold.holdout for fold in plan.folds] == ["P01", "P02", "P03", "P04"]
    assert plan.fold_for("P03").index == 2


def test_plan_lopo_two_and_one_patients() -> None:
    assert len(plan_lopo(_images([1, 1]))) == 2
    with pytest.raises(ValueError, match="at least 2 patients"):
        plan_lopo(_images([3]))
    with pytest.raises(ValueError, match="no fold holds out"):
        plan_lopo(_images([1, 1])).fold_for("P09")


def test_batch_sampler_walks_epochs(rng: np.random.Generator) -> None:
    sampler = BatchSampler(5, 3, rng)
    drawn = np.concatenate([sampler.next_batch() for _ in range(4)])
    assert sorted(drawn[:5]) == [0, 1, 2, 3, 4]
    assert sorted(drawn[5:10]) == [0, 1, 2, 3, 4]
    assert len(drawn) == 12

    small = BatchSampler(2, 5, rng).next_batch()
    assert len(small) == 5 and set(small) == {0, 1}


def test_fold_streams_are_reproducible() -> None:
    first = FoldStreams.for_fold(3, 1)
    again = FoldStreams.for_fold(3, 1)
    other = FoldStreams.for_fold(3, 2)
    assert first.init.random() == again.init.random()
    assert first.augment.random() != first.sample.random()
    assert FoldStreams.for_fold(3, 1).init.random() != other.init.random()


def _tiny_config(**train: object) -> ExperimentConfig:
    return build_experiment_config(
        "desk",
        {
            "network": {"levels": 1, "channels": 4},
            "train": {
                "iterations": 4,
                "batch_size": 4,
                "checkpoint_iterations": [2, 4],
                "eval_every": 2,
                "log_every": 2,
                "seed": 5,
                **train,
            },
            "canvas": [32, 32],
            "network_size": [16, 16],
        },
        "sunet",
    )


@pytest.fixture(scope="module")
def tiny_cases(tmp_path_factory: pytest.TempPathFactory) -> list[LabeledCase]:
    root = tmp_path_factory.mktemp("tiny")
    synth_dataset(root, n_patients=3, images_per_patient=2, seed=4, size=(32, 32))
    return load_cases(root)


@pytest.fixture(scope="module")
def tiny_run(tiny_cases: list[LabeledCase], make_repository: type) -> tuple[object, object]:
    repository = make_repository()
    result = run_crossval(tiny_cases, _tiny_config(), repository)
    return result, repository


def test_crossval_writes_one_row_per_image_and_operator(tiny_run: tuple) -> None:
    result, repository = tiny_run
    metrics = repository.read_table(METRICS_TABLE)
    assert len(metrics) == 6 * 3
    assert list(metrics[0]) == list(MetricsRecord.columns())
    assert {row["rater_a"] for row in metrics} == {"auto"}
    assert {row["rater_b"] for row in metrics} == {"op1", "op2", "op3"}
    assert len(repository.read_table(INTEROBSERVER_TABLE)) == 6 * 3
    assert [fold.holdout for fold in result.folds] == ["P01", "P02", "P03"]
    assert repository.documents[CONFIG_DOCUMENT]["train"]["iterations"] == 4


def test_crossval_curves_and_tracked_dice(tiny_run: tuple) -> None:
    _, repository = tiny_run
    curves = repository.read_table(CURVES_TABLE)
    assert len(curves) == 3 * 4
    mean = repository.read_table(CURVES_MEAN_TABLE)
    assert [row["iteration"] for row in mean] == ["1", "2", "3", "4"]
    assert {row["folds"] for row in mean} == {"3"}

    dice_curve = repository.read_table(DICE_CURVE_TABLE)
    assert sorted({row["iteration"] for row in dice_curve}) == ["0", "2", "4"]
    assert len(dice_curve) == 3 * 2 * 3
    assert {row["image"] for row in dice_curve} == {"P01_0", "P01_1"}

    labels = [row["label"] for row in repository.read_table(PERCENTILE_TABLE)]
    assert labels[:5] == ["p0", "p25", "p50", "p75", "p100"]
    assert set(labels[5:]) == {"valsalva_p75", "rest_p75"}


def test_crossval_stores_checkpoints(tiny_run: tuple) -> None:
    _, repository = tiny_run
    expected = {checkpoint_name(fold, step) for fold in range(3) for step in (2, 4)}
    assert set(repository.networks) == expected


def test_crossval_is_deterministic_and_worker_independent(
    tiny_run: tuple, tiny_cases: list[LabeledCase], make_repository: type
) -> None:
    _, repository = tiny_run
    threaded = make_repository()
    run_crossval(tiny_cases, _tiny_config(), threaded, workers=2)
    for table in (METRICS_TABLE, CURVES_TABLE, DICE_CURVE_TABLE):
        assert threaded.tables[table] == repository.tables[table]


def test_activation_histogram_from_checkpoints(tiny_run: tuple, tiny_cases: list[LabeledCase]) -> None:
    _, repository = tiny_run
    batch = np.random.default_rng(0).standard_normal((2, 1, 16, 16))
    rows = emit_activation_histogram(repository, 0, [2, 4, 4], batch)
    assert len(rows) == 3 * 64
    net, step = repository.load_network(checkpoint_name(0, 4))
    assert step == 4
    activations = net.last_block_activations(batch).size
    for block in range(3):
        counts = [row[3] for row in rows[block * 64 : (block + 1) * 64]]
        assert sum(counts) == activations
    assert rows[64:128] == rows[128:192]
    assert rows[0][1] == -2.0 and rows[63][2] == 4.0
    assert len(repository.read_table(histogram_table_name(0))) == 3 * 64


def test_histogram_needs_checkpoint(repository) -> None:
    with pytest.raises(FileNotFoundError):
        emit_activation_histogram(repository, 0, [100], np.zeros((1, 1, 16, 16)))


def test_single_split_holds_out_one_patient(tiny_cases: list[LabeledCase], repository) -> None:
    result = run_single_split(tiny_cases, _tiny_config(iterations=1), repository, holdout="P02")
    assert [fold.holdout for fold in result.folds] == ["P02"]
    assert len(repository.read_table(METRICS_TABLE)) == 2 * 3
    assert {row["patient"] for row in repository.read_table(INTEROBSERVER_TABLE)} == {"P02"}
    with pytest.raises(ValueError, match="no fold holds out"):
        run_single_split(tiny_cases, _tiny_config(iterations=1), repository, holdout="P09")


def _diverge_first_step(monkeypatch: pytest.MonkeyPatch) -> None:
    calls = []

    def step(*args: object, **kwargs: object) -> float:
        calls.append(1)
        if len(calls) == 1:
            raise TrainingDivergedError("non-finite loss at step 1")
        return train_step(*args, **kwargs)

    monkeypatch.setattr("harness.crossval.train_step", step)


def test_diverged_fold_is_recorded_and_the_others_are_kept(
    tiny_cases: list[LabeledCase],
    repository,
    monkeypatch: pytest.MonkeyPatch,
    caplog: pytest.LogCaptureFixture,
) -> None:
    _diverge_first_step(monkeypatch)
    with caplog.at_level(logging.ERROR):
        result = run_crossval(tiny_cases, _tiny_config(), repository)
    assert "diverged" in caplog.text

    assert [(f.fold, f.holdout) for f in result.failed] == [(0, "P01")]
    assert [fold.holdout for fold in result.folds] == ["P02", "P03"]
    failed = repository.read_table(FAILED_FOLDS_TABLE)
    assert [(row["fold"], row["holdout"]) for row in failed] == [("0", "P01")]
    assert "non-finite" in failed[0]["reason"]

    metrics = repository.read_table(METRICS_TABLE)
    assert len(metrics) == 2 * 2 * 3
    assert {row["patient"] for row in metrics} == {"P02", "P03"}
    assert {row["fold"] for row in repository.read_table(CURVES_TABLE)} == {"1", "2"}
    assert len(repository.read_table(INTEROBSERVER_TABLE)) == 6 * 3
    assert checkpoint_name(0, 2) not in repository.networks
    assert checkpoint_name(1, 4) in repository.networks


def test_clean_run_has_no_failed_folds(tiny_run: tuple) -> None:
    result, repository = tiny_run
    assert result.failed == []
    assert repository.read_table(FAILED_FOLDS_TABLE) == []


def test_unet_runs_on_the_same_plan(
    tiny_run: tuple, tiny_cases: list[LabeledCase], make_repository: type
) -> None:
    _, sunet_repository = tiny_run
    unet = _tiny_config()
    unet = unet.model_copy(
        update={"network": unet.network.model_copy(update={"activation": "batchnorm_relu"})}
    )
    repository = make_repository()
    run_crossval(tiny_cases, unet, repository)

    def keys(repo) -> list[tuple[str, str, str]]:
        return [
            (row["patient"], row["image"], row["rater_b"])
            for row in repo.read_table(METRICS_TABLE)
        ]

    assert keys(repository) == keys(sunet_repository)
