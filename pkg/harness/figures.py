"""harness.figures

Data behind the figures: activation histograms from stored checkpoints,
fold-averaged training curves and the percentile example cases.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from collections.abc import Iterable, Sequence

import numpy as np

from harness.repository import ResultsRepository
from sunet.metrics import MetricsRecord
from sunet.network import Network
from sunet.stats import STAGES, image_means

HISTOGRAM_BINS = 64
HISTOGRAM_RANGE = (-2.0, 4.0)
CASE_PERCENTILES = (0, 25, 50, 75, 100)
STAGE_PERCENTILE = 75


def checkpoint_name(fold: int, step: int) -> str:
    """Repository path of the checkpoint of ``fold`` at ``step``."""
    return f"checkpoints/fold{fold:02d}_iter{step:05d}.ckpt"


def histogram_table_name(fold: int) -> str:
    """Table name of the activation histogram of ``fold``."""
    return f"histogram_fold{fold:02d}.csv"


def activation_histogram(net: Network, batch: np.ndarray) -> np.ndarray:
    """Counts of last-block activations over HISTOGRAM_RANGE; outliers land in the end bins."""
    values = net.last_block_activations(batch).ravel()
    clipped = np.clip(values, *HISTOGRAM_RANGE)
    counts, _ = np.histogram(clipped, bins=HISTOGRAM_BINS, range=HISTOGRAM_RANGE)
    return counts


def emit_activation_histogram(
    repository: ResultsRepository,
    fold: int,
    iterations: Sequence[int],
    batch: np.ndarray,
) -> list[tuple[int, float, float, int]]:
    """Histogram rows (iteration, bin_low, bin_high, count) for each stored checkpoint."""
    edges = np.linspace(*HISTOGRAM_RANGE, HISTOGRAM_BINS + 1)
    rows = []
    for iteration in iterations:
        net, step = repository.load_network(checkpoint_name(fold, iteration))
        counts = activation_histogram(net, batch)
        rows.extend(
            (step, float(edges[i]), float(edges[i + 1]), int(count))
            for i, count in enumerate(counts)
        )
    repository.write_table(
        histogram_table_name(fold), ("iteration", "bin_low", "bin_high", "count"), rows
    )
    logging.info(f"Wrote activation histograms for fold {fold} at iterations {list(iterations)}")
    return rows


def average_curves(
    curves: Iterable[tuple[int, int, float]],
) -> list[tuple[int, float, float, int]]:
    """Mean and SD (ddof=1, 0 for a single fold) of the loss per iteration over folds."""
    by_step: dict[int, list[float]] = defaultdict(list)
    for _fold, step, loss in curves:
        by_step[step].append(loss)
    rows = []
    for step in sorted(by_step):
        losses = by_step[step]
        sd = float(np.std(losses, ddof=1)) if len(losses) > 1 else 0.0
        rows.append((step, float(np.mean(losses)), sd, len(losses)))
    return rows


def _nearest_case(
    means: dict[tuple[str, str], float], percentile: float
) -> tuple[str, str]:
    target = float(np.percentile(list(means.values()), percentile))
    # Sorted keys: ties go to the first image in (patient, image) order.
    return min(sorted(means), key=lambda key: abs(means[key] - target))


def select_percentile_cases(
    records: Sequence[MetricsRecord],
) -> list[tuple[str, str, str, str, float]]:
    """Images closest to the 0/25/50/75/100th percentiles of per-image mean Dice,
    then the 75th-percentile image of every stage."""
    stages = {record.image_key: record.stage for record in records}
    means = image_means(records, "dice")
    if not means:
        return []
    rows = []
    for percentile in CASE_PERCENTILES:
        key = _nearest_case(means, percentile)
        rows.append((f"p{percentile}", *key, stages[key], means[key]))
    for stage in STAGES:
        in_stage = {key: value for key, value in means.items() if stages[key] == stage}
        if in_stage:
            key = _nearest_case(in_stage, STAGE_PERCENTILE)
            rows.append((f"{stage}_p{STAGE_PERCENTILE}", *key, stage, in_stage[key]))
    return rows
