"""harness.reports

Summary tables from one or more run directories: per-method median [IQR]
(table1), interobserver agreement (table2), Williams' indices (table3), stage
areas (table4) and paired t-tests between methods (ttests).
"""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

from harness.crossval import INTEROBSERVER_TABLE, METRICS_TABLE
from harness.repository import ResultsRepository
from sunet.metrics import REPORT_METRICS, MetricsRecord
from sunet.stats import (
    AgreementTable,
    DegenerateTestError,
    aggregate_report,
    image_means,
    paired_t_test,
    stage_area_analysis,
    williams_index,
)

TABLE1 = "table1.csv"
TABLE2 = "table2.csv"
TABLE3 = "table3.csv"
TABLE4 = "table4.csv"
TTESTS = "ttests.csv"


@dataclass(frozen=True)
class RunTables:
    """Metric rows of one method's run."""

    method: str
    records: list[MetricsRecord]
    interobserver: list[MetricsRecord]


def load_run(method: str, repository: ResultsRepository) -> RunTables:
    """Read the metric and interobserver tables of one cross-validation run."""
    return RunTables(
        method=method,
        records=[MetricsRecord.from_row(row) for row in repository.read_table(METRICS_TABLE)],
        interobserver=[
            MetricsRecord.from_row(row) for row in repository.read_table(INTEROBSERVER_TABLE)
        ],
    )


def _with_interobserver(run: RunTables, interobserver: list[MetricsRecord]) -> list[MetricsRecord]:
    images = {record.image_key for record in run.records}
    return run.records + [r for r in interobserver if r.image_key in images]


def _table2_rows(interobserver: list[MetricsRecord]) -> list[list[str]]:
    rows = [["all", *aggregate_report(interobserver)["interobserver"].values()]]
    pairs = sorted({(record.rater_a, record.rater_b) for record in interobserver})
    for rater_a, rater_b in pairs:
        subset = [r for r in interobserver if (r.rater_a, r.rater_b) == (rater_a, rater_b)]
        rows.append([f"{rater_a}-{rater_b}", *aggregate_report(subset)["interobserver"].values()])
    return rows


def _ttest_rows(runs: Sequence[RunTables]) -> list[tuple[object, ...]]:
    rows: list[tuple[object, ...]] = []
    for first, second in itertools.combinations(runs, 2):
        for metric in REPORT_METRICS:
            means_a = image_means(first.records, metric)
            means_b = image_means(second.records, metric)
            common = [
                key
                for key in sorted(set(means_a) & set(means_b))
                if math.isfinite(means_a[key]) and math.isfinite(means_b[key])
            ]
            if len(common) < 2:
                logging.warning(
                    f"{first.method} vs {second.method} {metric}: fewer than 2 paired images"
                )
                continue
            try:
                result = paired_t_test(
                    [means_a[key] for key in common], [means_b[key] for key in common]
                )
                statistic, pvalue = result.statistic, result.pvalue
            except DegenerateTestError as exc:
                logging.warning(f"{first.method} vs {second.method} {metric}: {exc}")
                statistic, pvalue = math.nan, math.nan
            rows.append((first.method, second.method, metric, len(common), statistic, pvalue))
    return rows


def build_report(runs: Sequence[RunTables], repository: ResultsRepository) -> None:
    """Write table1-4 and ttests.csv for the given runs through ``repository``."""
    if not runs:
        raise ValueError("build_report needs at least one run")
    interobserver = runs[0].interobserver
    if not interobserver:
        raise ValueError(f"run {runs[0].method} has no interobserver rows")

    repository.write_table(
        TABLE1,
        ("method", *REPORT_METRICS),
        [[run.method, *aggregate_report(run.records)["computer"].values()] for run in runs],
    )
    repository.write_table(TABLE2, ("pair", *REPORT_METRICS), _table2_rows(interobserver))

    table3 = []
    for run in runs:
        for metric in REPORT_METRICS:
            table = AgreementTable.from_records(_with_interobserver(run, interobserver), metric)
            if table.n_images < 2:
                logging.warning(f"{run.method} {metric}: too few images for Williams' index")
                continue
            try:
                result = williams_index(table)
            except ValueError as exc:
                logging.warning(f"{run.method} {metric}: {exc}")
                continue
            table3.append(
                (run.method, metric, result.index, result.ci_low, result.ci_high, result.n_images)
            )
    repository.write_table(
        TABLE3, ("method", "metric", "index", "ci_low", "ci_high", "n_images"), table3
    )

    table4 = []
    for run in runs:
        for summary in stage_area_analysis(_with_interobserver(run, interobserver)):
            williams = summary.williams
            bounds = (
                (williams.index, williams.ci_low, williams.ci_high) if williams else ("", "", "")
            )
            table4.append(
                (
                    run.method,
                    summary.stage,
                    summary.n_images,
                    summary.computer_mean,
                    summary.computer_sd,
                    summary.computer_pairs,
                    summary.interobserver_mean,
                    summary.interobserver_sd,
                    summary.interobserver_pairs,
                    *bounds,
                )
            )
    repository.write_table(
        TABLE4,
        (
            "method",
            "stage",
            "n_images",
            "computer_mean_cm2",
            "computer_sd_cm2",
            "computer_pairs",
            "interobserver_mean_cm2",
            "interobserver_sd_cm2",
            "interobserver_pairs",
            "williams_index",
            "ci_low",
            "ci_high",
        ),
        table4,
    )
    repository.write_table(
        TTESTS,
        ("method_a", "method_b", "metric", "n_images", "statistic", "pvalue"),
        _ttest_rows(runs),
    )
    logging.info(f"Wrote report for methods {[run.method for run in runs]}")
