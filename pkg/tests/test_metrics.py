"""tests.test_metrics

Region overlap, contour extraction, contour distances and areas.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from sunet.imageops import BinaryMask
from sunet.metrics import (
    ContourPointSet,
    MetricsRecord,
    area_cm2,
    compare_masks,
    distance_metrics,
    extract_contour,
    region_metrics,
)


def _points(*coords: tuple[float, float]) -> ContourPointSet:
    return ContourPointSet(np.array(coords, dtype=np.float64), (1.0, 1.0))


def _brute_force(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float, float]:
    def nearest(source: np.ndarray, target: np.ndarray) -> list[float]:
        out = []
        for p in source:
            best = math.inf
            for q in target:
                dy, dx = p[0] - q[0], p[1] - q[1]
                best = min(best, math.sqrt(dy * dy + dx * dx))
            out.append(best)
        return out

    xy, yx = nearest(x, y), nearest(y, x)
    return (
        max(max(xy), max(yx)),
        math.fsum(xy) / len(xy),
        math.fsum(yx) / len(yx),
        math.fsum(xy + yx) / (len(xy) + len(yx)),
    )


def test_region_metrics_examples() -> None:
    square = np.zeros((6, 6), dtype=bool)
    square[1:4, 1:4] = True
    same = region_metrics(BinaryMask(square), BinaryMask(square))
    assert (same.dice, same.jaccard, same.fpd, same.fnd) == (1.0, 1.0, 0.0, 0.0)

    other = np.zeros((6, 6), dtype=bool)
    other[5, 5] = True
    disjoint = region_metrics(BinaryMask(square), BinaryMask(other))
    assert disjoint.dice == 0.0 and disjoint.jaccard == 0.0

    a = np.zeros((1, 3), dtype=bool)
    a[0, :2] = True
    b = np.zeros((1, 3), dtype=bool)
    b[0, 0] = True
    counted = region_metrics(BinaryMask(a), BinaryMask(b))
    assert counted.dice == pytest.approx(2 / 3)
    assert counted.jaccard == pytest.approx(1 / 2)
    assert counted.fpd == pytest.approx(2 / 3)
    assert counted.fnd == 0.0


def test_region_metrics_errors() -> None:
    with pytest.raises(ValueError, match="two empty masks"):
        region_metrics(BinaryMask(np.zeros((3, 3))), BinaryMask(np.zeros((3, 3))))
    with pytest.raises(ValueError, match="grids differ"):
        region_metrics(BinaryMask(np.ones((3, 3))), BinaryMask(np.ones((3, 4))))


def test_region_metric_identities_on_random_masks() -> None:
    rng = np.random.default_rng(0)
    for _ in range(1000):
        size = (int(rng.integers(16, 129)), int(rng.integers(16, 129)))
        a = rng.random(size) < rng.uniform(0.05, 0.6)
        b = rng.random(size) < rng.uniform(0.05, 0.6)
        m = region_metrics(BinaryMask(a), BinaryMask(b))
        assert m.dice + (m.fpd + m.fnd) / 2 == pytest.approx(1.0, abs=1e-12)
        assert m.jaccard == pytest.approx(m.dice / (2 - m.dice), abs=1e-12)
        swapped = region_metrics(BinaryMask(b), BinaryMask(a))
        assert swapped.dice == m.dice and swapped.fpd == m.fnd


def test_extract_contour_examples() -> None:
    single = np.zeros((8, 8), dtype=bool)
    single[3, 4] = True
    np.testing.assert_array_equal(extract_contour(BinaryMask(single)).points, [[3.0, 4.0]])

    square = np.zeros((7, 7), dtype=bool)
    square[2:5, 2:5] = True
    contour = extract_contour(BinaryMask(square))
    assert len(contour) == 8
    assert [3.0, 3.0] not in contour.points.tolist()

    halved = extract_contour(BinaryMask(square, (0.5, 0.5)))
    np.testing.assert_array_equal(halved.points, contour.points * 0.5)

    full = extract_contour(BinaryMask(np.ones((3, 3), dtype=bool)))
    assert len(full) == 8

    with pytest.raises(ValueError, match="empty"):
        extract_contour(BinaryMask(np.zeros((3, 3))))


def test_distance_metrics_examples() -> None:
    same = distance_metrics(_points((0, 0), (1, 2)), _points((0, 0), (1, 2)))
    assert (same.hausdorff, same.mad_ab, same.mad_ba, same.smad) == (0.0, 0.0, 0.0, 0.0)

    pythagoras = distance_metrics(_points((0, 0)), _points((3, 4)))
    assert (pythagoras.hausdorff, pythagoras.mad_ab, pythagoras.mad_ba, pythagoras.smad) == (
        5.0,
        5.0,
        5.0,
        5.0,
    )

    asymmetric = distance_metrics(_points((0, 0)), _points((0, 0), (0, 10)))
    assert asymmetric.mad_ab == 0.0
    assert asymmetric.mad_ba == 5.0
    assert asymmetric.hausdorff == 10.0
    assert asymmetric.smad == pytest.approx(10 / 3)


def test_distance_metrics_match_brute_force_bitwise() -> None:
    rng = np.random.default_rng(1)
    fixtures = [
        (np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])),
        (np.array([[0.0, 0.0]]), np.array([[0.0, 0.0], [0.0, 10.0]])),
    ]
    for _ in range(200):
        size = int(rng.integers(8, 40))
        a = rng.random((size, size)) < 0.3
        b = rng.random((size, size)) < 0.3
        a[0, 0] = b[-1, -1] = True
        spacing = (float(rng.uniform(0.3, 1.0)), float(rng.uniform(0.3, 1.0)))
        fixtures.append(
            (
                extract_contour(BinaryMask(a, spacing)).points,
                extract_contour(BinaryMask(b, spacing)).points,
            )
        )
    for x, y in fixtures:
        got = distance_metrics(ContourPointSet(x, (1.0, 1.0)), ContourPointSet(y, (1.0, 1.0)))
        assert (got.hausdorff, got.mad_ab, got.mad_ba, got.smad) == _brute_force(x, y)


def test_distance_metrics_are_symmetric(rng: np.random.Generator) -> None:
    x = _points(*rng.random((12, 2)).tolist())
    y = _points(*rng.random((7, 2)).tolist())
    forward, backward = distance_metrics(x, y), distance_metrics(y, x)
    assert forward.hausdorff == backward.hausdorff
    assert forward.smad == pytest.approx(backward.smad, abs=1e-15)
    assert forward.mad_ab == backward.mad_ba


def test_area_examples() -> None:
    assert area_cm2(BinaryMask(np.zeros((5, 5)))) == 0.0
    hundred = np.zeros((20, 20), dtype=bool)
    hundred[:10, :10] = True
    assert area_cm2(BinaryMask(hundred)) == pytest.approx(1.0)
    assert area_cm2(BinaryMask(hundred, (0.5, 0.5))) == pytest.approx(0.25)


def test_dilation_towards_superset_never_decreases_dice() -> None:
    from scipy import ndimage

    outer = np.zeros((30, 30), dtype=bool)
    outer[5:25, 5:25] = True
    inner = np.zeros_like(outer)
    inner[12:16, 12:16] = True
    previous = 0.0
    for _ in range(8):
        dice = region_metrics(BinaryMask(inner), BinaryMask(outer)).dice
        assert dice >= previous
        previous = dice
        inner = ndimage.binary_dilation(inner) & outer


def test_compare_masks_record_and_empty_prediction() -> None:
    manual = np.zeros((10, 10), dtype=bool)
    manual[2:6, 2:6] = True
    record = compare_masks(
        BinaryMask(manual),
        BinaryMask(manual),
        patient="P01",
        image="P01_0",
        stage="rest",
        rater_a="auto",
        rater_b="op1",
    )
    assert record.dice == 1.0 and record.hausdorff_mm == 0.0
    assert record.image_key == ("P01", "P01_0")
    assert record.columns()[:5] == ("patient", "image", "stage", "rater_a", "rater_b")

    empty = compare_masks(
        BinaryMask(np.zeros((10, 10))),
        BinaryMask(manual),
        patient="P01",
        image="P01_0",
        stage="rest",
        rater_a="auto",
        rater_b="op1",
    )
    assert empty.dice == 0.0 and empty.fnd == 2.0
    assert math.isnan(empty.hausdorff_mm) and math.isnan(empty.smad_mm)


def test_metrics_record_reads_back_from_text_row() -> None:
    row = {name: "1.5" for name in MetricsRecord.columns()}
    row.update(patient="P02", image="P02_1", stage="valsalva", rater_a="op1", rater_b="op3")
    record = MetricsRecord.from_row(row)
    assert record.stage == "valsalva" and record.dice == 1.5
