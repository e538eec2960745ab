"""tests.test_acceptance

Desk-scale training experiments on a synthesized cohort. They take minutes,
so they only run when SUNET_RUN_SLOW is set.
"""

from __future__ import annotations

import math
import os
import time

import numpy as np
import pytest

from harness.crossval import run_crossval, run_single_split
from harness.dataset import LabeledCase, load_cases
from harness.reports import TABLE1, TTESTS, build_report, load_run
from harness.synth import synth_dataset
from sunet.metrics import REPORT_METRICS
from sunet.models import build_experiment_config
from sunet.network import AdamState, build_network, train_step

DESK_FOLDS = 8
DESK_CORES = 4
DESK_BUDGET_SECONDS = 30 * 60

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(
        not os.environ.get("SUNET_RUN_SLOW"),
        reason="set SUNET_RUN_SLOW=1 to run desk-scale training",
    ),
]


@pytest.fixture(scope="module")
def desk_cases(tmp_path_factory: pytest.TempPathFactory) -> list[LabeledCase]:
    root = tmp_path_factory.mktemp("desk")
    synth_dataset(root, n_patients=8, images_per_patient=3, seed=0)
    return load_cases(root)


def test_desk_lopo_reaches_operator_agreement(
    desk_cases: list[LabeledCase], make_repository: type
) -> None:
    config = build_experiment_config("desk", architecture="sunet")
    result = run_crossval(desk_cases, config, make_repository(), workers=4)
    records = result.records
    assert len(records) == 24 * 3

    spacing = {case.image_id: case.spacing[0] for case in desk_cases}
    assert np.median([r.dice for r in records]) >= 0.85
    smad_px = [r.smad_mm / spacing[r.image] for r in records]
    assert np.nanmedian(smad_px) <= 2.0


def test_selu_network_is_batch_size_independent(
    desk_cases: list[LabeledCase], make_repository: type
) -> None:
    medians = {}
    for batch_size in (1, 16):
        config = build_experiment_config(
            "desk", {"train": {"batch_size": batch_size}}, architecture="sunet"
        )
        result = run_single_split(desk_cases, config, make_repository())
        medians[batch_size] = float(np.median([r.dice for r in result.records]))
    assert abs(medians[1] - medians[16]) <= 0.05


def test_architecture_comparison_report(
    desk_cases: list[LabeledCase], make_repository: type
) -> None:
    runs = []
    for arch in ("sunet", "unet"):
        repository = make_repository()
        run_crossval(desk_cases, build_experiment_config("desk", architecture=arch), repository, workers=4)
        runs.append(load_run(arch, repository))

    report = make_repository()
    build_report(runs, report)
    table1 = report.read_table(TABLE1)
    assert [row["method"] for row in table1] == ["sunet", "unet"]
    for row in table1:
        assert all(row[metric].endswith("]") for metric in REPORT_METRICS)
    assert {row["metric"] for row in report.read_table(TTESTS)} == set(REPORT_METRICS)


def test_desk_training_step_fits_the_runtime_budget() -> None:
    rng = np.random.default_rng(0)
    config = build_experiment_config("desk", architecture="sunet")
    net = build_network(config.network, rng)
    adam = AdamState.for_parameters(net.parameter_list(), lr=config.train.learning_rate)
    shape = (config.train.batch_size, *config.network_size)
    batch = (rng.random((shape[0], 1, *shape[1:])), (rng.random(shape) > 0.5).astype(np.float64))

    train_step(net, batch, config.loss, adam)
    steps = 5
    start = time.perf_counter()
    for _ in range(steps):
        train_step(net, batch, config.loss, adam)
    per_step = (time.perf_counter() - start) / steps

    rounds = math.ceil(DESK_FOLDS / DESK_CORES)
    projected = per_step * config.train.iterations * rounds
    assert projected <= DESK_BUDGET_SECONDS, (
        f"{per_step:.2f}s per step projects to {projected / 60:.1f} min for "
        f"{DESK_FOLDS} folds on {DESK_CORES} workers"
    )
