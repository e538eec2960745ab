"""sunet.metrics

Region-overlap and contour-distance agreement between two masks, plus area.
Distances and areas use the mask spacing, so they are reported in mm / cm^2.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields

import numpy as np
from scipy import ndimage

from sunet.imageops import BinaryMask

BOUNDARY_NEIGHBOURS = ndimage.generate_binary_structure(2, 1)

# Metrics summarized in the median [IQR] tables, in column order.
REPORT_METRICS = ("dice", "jaccard", "hausdorff_mm", "mad_mm", "smad_mm", "fpd", "fnd")
AGREEMENT_METRICS = frozenset({"dice", "jaccard"})


@dataclass(frozen=True)
class RegionMetrics:
    dice: float
    jaccard: float
    fpd: float
    fnd: float


@dataclass(frozen=True)
class DistanceMetrics:
    hausdorff: float
    mad_ab: float
    mad_ba: float
    smad: float


@dataclass(frozen=True)
class ContourPointSet:
    """Boundary pixel centers of a mask in (row, col) mm coordinates."""

    points: np.ndarray
    spacing: tuple[float, float]

    def __len__(self) -> int:
        return int(self.points.shape[0])


def _check_grids(a: BinaryMask, b: BinaryMask) -> None:
    if a.values.shape != b.values.shape:
        raise ValueError(f"mask grids differ: {a.values.shape} vs {b.values.shape}")


def region_metrics(a: BinaryMask, b: BinaryMask) -> RegionMetrics:
    """Dice, Jaccard, FPD and FND of automatic mask ``a`` against manual mask ``b``."""
    _check_grids(a, b)
    size_a = int(a.values.sum())
    size_b = int(b.values.sum())
    total = size_a + size_b
    if total == 0:
        raise ValueError("region metrics are undefined for two empty masks")
    overlap = int(np.logical_and(a.values, b.values).sum())
    union = total - overlap
    return RegionMetrics(
        dice=2.0 * overlap / total,
        jaccard=overlap / union,
        fpd=2.0 * (size_a - overlap) / total,
        fnd=2.0 * (size_b - overlap) / total,
    )


def extract_contour(mask: BinaryMask) -> ContourPointSet:
    """Foreground pixels touching background (4-neighbourhood) or the image border."""
    if mask.is_empty():
        raise ValueError("cannot extract a contour from an empty mask")
    interior = ndimage.binary_erosion(
        mask.values, structure=BOUNDARY_NEIGHBOURS, border_value=0
    )
    rows, cols = np.nonzero(mask.values & ~interior)
    points = np.column_stack([rows * mask.spacing[0], cols * mask.spacing[1]])
    return ContourPointSet(points.astype(np.float64), mask.spacing)


def _nearest_distances(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    # Same operation order as a scalar sqrt(dr * dr + dc * dc).
    rows = source[:, None, 0] - target[None, :, 0]
    cols = source[:, None, 1] - target[None, :, 1]
    return np.sqrt(rows * rows + cols * cols).min(axis=1)


def distance_metrics(x: ContourPointSet, y: ContourPointSet) -> DistanceMetrics:
    """Exact Hausdorff, directional MADs and symmetric MAD between two contours."""
    if len(x) == 0 or len(y) == 0:
        raise ValueError("distance metrics need two non-empty contours")
    x_to_y = _nearest_distances(x.points, y.points)
    y_to_x = _nearest_distances(y.points, x.points)
    sum_xy = math.fsum(x_to_y)
    sum_yx = math.fsum(y_to_x)
    return DistanceMetrics(
        hausdorff=float(max(x_to_y.max(), y_to_x.max())),
        mad_ab=sum_xy / len(x),
        mad_ba=sum_yx / len(y),
        smad=math.fsum(np.concatenate([x_to_y, y_to_x])) / (len(x) + len(y)),
    )


def area_cm2(mask: BinaryMask) -> float:
    """Foreground area; 100 mm^2 make 1 cm^2."""
    return mask.area_pixels * mask.spacing[0] * mask.spacing[1] / 100.0


@dataclass(frozen=True)
class MetricsRecord:
    """One rater-pair comparison as written to the metric CSVs."""

    patient: str
    image: str
    stage: str
    rater_a: str
    rater_b: str
    dice: float
    jaccard: float
    hausdorff_mm: float
    mad_mm: float
    smad_mm: float
    fpd: float
    fnd: float
    area_a_cm2: float
    area_b_cm2: float
    mad_ba_mm: float

    @classmethod
    def columns(cls) -> tuple[str, ...]:
        return tuple(item.name for item in fields(cls))

    def as_row(self) -> tuple[object, ...]:
        return astuple(self)

    @classmethod
    def from_row(cls, row: dict[str, str]) -> MetricsRecord:
        values: dict[str, object] = {}
        for item in fields(cls):
            raw = row[item.name]
            values[item.name] = raw if item.type == "str" else float(raw)
        return cls(**values)

    @property
    def image_key(self) -> tuple[str, str]:
        return self.patient, self.image


def compare_masks(
    a: BinaryMask,
    b: BinaryMask,
    *,
    patient: str,
    image: str,
    stage: str,
    rater_a: str,
    rater_b: str,
) -> MetricsRecord:
    """All metrics for one pair; distances are NaN when either mask is empty."""
    region = region_metrics(a, b)
    if a.is_empty() or b.is_empty():
        distances = DistanceMetrics(math.nan, math.nan, math.nan, math.nan)
    else:
        distances = distance_metrics(extract_contour(a), extract_contour(b))
    return MetricsRecord(
        patient=patient,
        image=image,
        stage=stage,
        rater_a=rater_a,
        rater_b=rater_b,
        dice=region.dice,
        jaccard=region.jaccard,
        hausdorff_mm=distances.hausdorff,
        mad_mm=distances.mad_ab,
        smad_mm=distances.smad,
        fpd=region.fpd,
        fnd=region.fnd,
        area_a_cm2=area_cm2(a),
        area_b_cm2=area_cm2(b),
        mad_ba_mm=distances.mad_ba,
    )
