"""sunet.stats

Agreement statistics over the pairwise metric rows: median [IQR] summaries,
the paired t-test between methods, Williams' index with a jackknife CI and the
per-stage area analysis.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import stats as scipy_stats

from sunet.metrics import AGREEMENT_METRICS, REPORT_METRICS, MetricsRecord

COMPUTER_RATER = "auto"
OPERATORS = ("op1", "op2", "op3")
OPERATOR_PAIRS = (("op1", "op2"), ("op1", "op3"), ("op2", "op3"))
STAGES = ("contraction", "valsalva", "rest")
CONFIDENCE_Z = 1.96

RecordValue = Callable[[MetricsRecord], float]


class DegenerateTestError(ValueError):
    """Paired differences with zero variance but a non-zero mean."""


def is_computer_row(record: MetricsRecord) -> bool:
    """True for computer-to-operator rows, False for operator pairs."""
    return record.rater_a == COMPUTER_RATER


@dataclass(frozen=True)
class AgreementTable:
    """Per-image values of one metric for the three computer-observer pairs
    (auto, op_j) and the three interobserver pairs (op_i, op_j)."""

    metric: str
    computer: np.ndarray
    interobserver: np.ndarray
    agreement: bool
    images: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        computer = np.asarray(self.computer, dtype=np.float64)
        interobserver = np.asarray(self.interobserver, dtype=np.float64)
        if computer.ndim != 2 or computer.shape[1] != 3:
            raise ValueError(f"computer values must be [n, 3], got {computer.shape}")
        if interobserver.shape != computer.shape:
            raise ValueError(
                f"interobserver values {interobserver.shape} do not match "
                f"computer values {computer.shape}"
            )
        object.__setattr__(self, "computer", computer)
        object.__setattr__(self, "interobserver", interobserver)

    @property
    def n_images(self) -> int:
        return int(self.computer.shape[0])

    def disagreements(self) -> tuple[np.ndarray, np.ndarray]:
        """Computer and interobserver disagreements; agreement metrics become 1 - v."""
        if self.agreement:
            return 1.0 - self.computer, 1.0 - self.interobserver
        return self.computer, self.interobserver

    @classmethod
    def from_records(
        cls,
        records: Iterable[MetricsRecord],
        value: str | RecordValue,
        agreement: bool | None = None,
    ) -> AgreementTable:
        """Collect the six pair values per image.

        ``value`` is a MetricsRecord field name or a callable; images with a
        non-finite value (e.g. distances of an empty prediction) are skipped.
        """
        if isinstance(value, str):
            metric = value

            def getter(record: MetricsRecord) -> float:
                return float(getattr(record, metric))

            if agreement is None:
                agreement = metric in AGREEMENT_METRICS
        else:
            metric = getattr(value, "__name__", "value")
            getter = value
            agreement = bool(agreement)

        by_image: dict[tuple[str, str], dict[tuple[str, str], float]] = defaultdict(dict)
        for record in records:
            by_image[record.image_key][(record.rater_a, record.rater_b)] = getter(record)

        computer_pairs = [(COMPUTER_RATER, operator) for operator in OPERATORS]
        computer, interobserver, images = [], [], []
        for image_key in sorted(by_image):
            pairs = by_image[image_key]
            missing = [p for p in computer_pairs + list(OPERATOR_PAIRS) if p not in pairs]
            if missing:
                raise ValueError(f"image {image_key[1]} is missing rater pairs {missing}")
            row_c = [pairs[p] for p in computer_pairs]
            row_i = [pairs[p] for p in OPERATOR_PAIRS]
            if not all(math.isfinite(v) for v in row_c + row_i):
                logging.warning(f"{metric}: skipping image {image_key[1]} with undefined values")
                continue
            computer.append(row_c)
            interobserver.append(row_i)
            images.append(image_key)

        return cls(
            metric=metric,
            computer=np.reshape(np.array(computer, dtype=np.float64), (-1, 3)),
            interobserver=np.reshape(np.array(interobserver, dtype=np.float64), (-1, 3)),
            agreement=agreement,
            images=tuple(images),
        )


@dataclass(frozen=True)
class WilliamsResult:
    index: float
    ci_low: float
    ci_high: float
    n_images: int

    def contains_one(self) -> bool:
        return self.ci_low <= 1.0 <= self.ci_high


def _williams_ratio(computer: np.ndarray, interobserver: np.ndarray) -> float:
    # Mean of per-pair means: interobserver over computer-observer.
    numerator = float(np.mean(interobserver.mean(axis=0)))
    denominator = float(np.mean(computer.mean(axis=0)))
    if denominator == 0.0:
        if numerator == 0.0:
            return 1.0
        raise ValueError("Williams' index undefined: zero computer-observer disagreement")
    return numerator / denominator


def williams_index(table: AgreementTable) -> WilliamsResult:
    """Interobserver / computer-observer disagreement ratio with a jackknife 95% CI."""
    n = table.n_images
    if n < 2:
        raise ValueError(f"Williams' index needs at least 2 images, got {n}")
    computer, interobserver = table.disagreements()
    index = _williams_ratio(computer, interobserver)

    keep = np.ones(n, dtype=bool)
    pseudo = np.empty(n)
    for i in range(n):
        keep[i] = False
        pseudo[i] = n * index - (n - 1) * _williams_ratio(
            computer[keep], interobserver[keep]
        )
        keep[i] = True

    half_width = CONFIDENCE_Z * float(np.std(pseudo, ddof=1)) / math.sqrt(n)
    return WilliamsResult(
        index=index,
        ci_low=index - half_width,
        ci_high=index + half_width,
        n_images=n,
    )


class TTestResult(NamedTuple):
    statistic: float
    pvalue: float


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired Student t-test on per-image values."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be 1-D of equal length, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError(f"paired t-test needs at least 2 pairs, got {n}")

    differences = a - b
    mean = float(differences.mean())
    sd = float(np.std(differences, ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0)
        raise DegenerateTestError("degenerate: identical offset")
    statistic = mean * math.sqrt(n) / sd
    pvalue = float(2.0 * scipy_stats.t.sf(abs(statistic), n - 1))
    return TTestResult(statistic, pvalue)


def image_means(records: Iterable[MetricsRecord], metric: str) -> dict[tuple[str, str], float]:
    """Per-image mean of ``metric`` over the computer-observer pairs."""
    values: dict[tuple[str, str], list[float]] = defaultdict(list)
    for record in records:
        if is_computer_row(record):
            values[record.image_key].append(float(getattr(record, metric)))
    return {key: float(np.mean(items)) for key, items in sorted(values.items())}


def median_iqr(values: Iterable[float]) -> tuple[float, float]:
    """Median and Q3 - Q1 with linear interpolation, ignoring NaN."""
    finite = np.array([v for v in values if not math.isnan(v)], dtype=np.float64)
    if finite.size == 0:
        return math.nan, math.nan
    q1, median, q3 = np.percentile(finite, [25.0, 50.0, 75.0])
    return float(median), float(q3 - q1)


def format_median_iqr(median: float, iqr: float) -> str:
    """Render as ``median [iqr]`` with six significant digits."""
    return f"{median:.6g} [{iqr:.6g}]"


def aggregate_report(records: Sequence[MetricsRecord]) -> dict[str, dict[str, str]]:
    """``{"computer" | "interobserver": {metric: "median [iqr]"}}`` over the given rows."""
    if not records:
        raise ValueError("aggregate_report needs at least one row")
    groups: dict[str, list[MetricsRecord]] = {"computer": [], "interobserver": []}
    for record in records:
        groups["computer" if is_computer_row(record) else "interobserver"].append(record)

    report: dict[str, dict[str, str]] = {}
    for group, rows in groups.items():
        if not rows:
            continue
        report[group] = {
            metric: format_median_iqr(*median_iqr(getattr(row, metric) for row in rows))
            for metric in REPORT_METRICS
        }
    return report


@dataclass(frozen=True)
class StageAreaSummary:
    """Per-stage area disagreement; mean and SD are taken over per-image means."""

    stage: str
    n_images: int
    computer_mean: float
    computer_sd: float
    computer_pairs: int
    interobserver_mean: float
    interobserver_sd: float
    interobserver_pairs: int
    williams: WilliamsResult | None


def area_difference(record: MetricsRecord) -> float:
    """Absolute area difference of the pair in cm^2."""
    return abs(record.area_a_cm2 - record.area_b_cm2)


def _mean_sd(values: list[float]) -> tuple[float, float]:
    if not values:
        return math.nan, math.nan
    sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return float(np.mean(values)), sd


def _image_mean_differences(rows: Iterable[MetricsRecord], computer: bool) -> list[float]:
    values: dict[tuple[str, str], list[float]] = defaultdict(list)
    for record in rows:
        if is_computer_row(record) == computer:
            values[record.image_key].append(area_difference(record))
    return [float(np.mean(items)) for _, items in sorted(values.items())]


def stage_area_analysis(records: Sequence[MetricsRecord]) -> list[StageAreaSummary]:
    """Absolute area differences (cm^2) per stage with Williams' index.

    Each image contributes the mean over its rater pairs, so an image weighs the
    same whatever its pair count; pair counts are reported alongside.
    """
    by_stage: dict[str, list[MetricsRecord]] = {stage: [] for stage in STAGES}
    for record in records:
        if record.stage not in by_stage:
            raise ValueError(f"unknown stage {record.stage!r}; expected one of {STAGES}")
        by_stage[record.stage].append(record)

    summaries = []
    for stage in STAGES:
        rows = by_stage[stage]
        computer_pairs = sum(1 for r in rows if is_computer_row(r))
        table = AgreementTable.from_records(rows, area_difference, agreement=False)
        williams = None
        if table.n_images >= 2:
            try:
                williams = williams_index(table)
            except ValueError as exc:
                logging.warning(f"{stage} area: {exc}")
        summaries.append(
            StageAreaSummary(
                stage,
                len({r.image_key for r in rows}),
                *_mean_sd(_image_mean_differences(rows, computer=True)),
                computer_pairs,
                *_mean_sd(_image_mean_differences(rows, computer=False)),
                len(rows) - computer_pairs,
                williams,
            )
        )
    return summaries
