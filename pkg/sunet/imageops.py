"""sunet.imageops

Pixel grids with physical spacing and the geometric / morphological operations
applied before training and after prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import TypeVar

import numpy as np
from scipy import ndimage

from sunet.models import AffineRanges

Spacing = tuple[float, float]

CANVAS = (214, 262)
NETWORK_SIZE = (107, 131)
FOREGROUND_CONNECTIVITY = np.ones((3, 3), dtype=bool)


def _check_spacing(spacing: Spacing) -> Spacing:
    row, col = (float(value) for value in spacing)
    if row <= 0 or col <= 0:
        raise ValueError(f"pixel spacing must be positive, got {spacing}")
    return row, col


@dataclass(frozen=True)
class GrayImage:
    """Intensity image in [0, 1] with (row, col) spacing in mm."""

    values: np.ndarray
    spacing: Spacing = (1.0, 1.0)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"GrayImage must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("GrayImage values must be finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class BinaryMask:
    """Strictly binary mask on the same kind of grid as GrayImage."""

    values: np.ndarray
    spacing: Spacing = (1.0, 1.0)

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError(f"BinaryMask must be 2-D, got shape {values.shape}")
        if values.dtype != bool:
            if not np.all((values == 0) | (values == 1)):
                raise ValueError("BinaryMask values must be 0 or 1")
            values = values.astype(bool)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def area_pixels(self) -> int:
        return int(self.values.sum())

    def is_empty(self) -> bool:
        return not self.values.any()


Grid = TypeVar("Grid", GrayImage, BinaryMask)


@dataclass(frozen=True)
class AffineParams:
    """Six degrees of freedom: rotation, 2 translations, 2 scales, 1 shear."""

    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    scale: tuple[float, float] = (1.0, 1.0)
    shear: float = 0.0

    def __post_init__(self) -> None:
        if min(self.scale) <= 0:
            raise ValueError(f"affine scale must be positive, got {self.scale}")

    def matrix(self) -> np.ndarray:
        """Forward 2x2 map in (row, col) coordinates: rotation . shear . scale."""
        cos, sin = math.cos(self.rotation), math.sin(self.rotation)
        rotation = np.array([[cos, -sin], [sin, cos]])
        shear = np.array([[1.0, self.shear], [0.0, 1.0]])
        return rotation @ shear @ np.diag(self.scale)


def _margins(size: int, target: int) -> tuple[int, int]:
    total = abs(size - target)
    return total // 2, total - total // 2


def crop_or_pad(grid: Grid, target: tuple[int, int] = CANVAS) -> Grid:
    """Center crop or zero-pad to ``target``; odd margins put the extra on bottom/right."""
    values = grid.values
    for axis, size in enumerate(target):
        current = values.shape[axis]
        before, after = _margins(current, size)
        if current > size:
            values = np.take(values, np.arange(before, before + size), axis=axis)
        elif current < size:
            widths = [(0, 0), (0, 0)]
            widths[axis] = (before, after)
            values = np.pad(values, widths)
    return replace(grid, values=values)


def _sample_grid(shape: tuple[int, int], target: tuple[int, int]) -> np.ndarray:
    rows = np.linspace(0.0, shape[0] - 1, target[0])
    cols = np.linspace(0.0, shape[1] - 1, target[1])
    return np.stack(np.meshgrid(rows, cols, indexing="ij"))


def resize_bilinear(grid: Grid, target: tuple[int, int] = NETWORK_SIZE) -> Grid:
    """Corner-aligned bilinear resize; masks are re-thresholded at 0.5."""
    if min(target) < 1:
        raise ValueError(f"resize target extents must be >= 1, got {target}")
    height, width = grid.values.shape
    resized = ndimage.map_coordinates(
        grid.values.astype(np.float64),
        _sample_grid((height, width), target),
        order=1,
        mode="nearest",
    )
    spacing = (
        grid.spacing[0] * height / target[0],
        grid.spacing[1] * width / target[1],
    )
    if isinstance(grid, BinaryMask):
        return BinaryMask(resized >= 0.5, spacing)
    return GrayImage(resized, spacing)


def resize_nearest(mask: BinaryMask, target: tuple[int, int]) -> BinaryMask:
    """Nearest-neighbour resize; an integer factor repeats each pixel."""
    if min(target) < 1:
        raise ValueError(f"resize target extents must be >= 1, got {target}")
    height, width = mask.values.shape
    rows = (np.arange(target[0]) * height) // target[0]
    cols = (np.arange(target[1]) * width) // target[1]
    spacing = (
        mask.spacing[0] * height / target[0],
        mask.spacing[1] * width / target[1],
    )
    return BinaryMask(mask.values[np.ix_(rows, cols)], spacing)


def sample_affine(ranges: AffineRanges, rng: np.random.Generator) -> AffineParams:
    """Draw one set of affine parameters uniformly from the configured ranges."""
    rotation = math.radians(ranges.rotation_deg)
    return AffineParams(
        rotation=float(rng.uniform(-rotation, rotation)),
        translation=tuple(
            float(value)
            for value in rng.uniform(-ranges.translation_px, ranges.translation_px, 2)
        ),
        scale=tuple(
            float(value) for value in rng.uniform(ranges.scale_min, ranges.scale_max, 2)
        ),
        shear=float(rng.uniform(-ranges.shear, ranges.shear)),
    )


def apply_affine(
    image: GrayImage, mask: BinaryMask, params: AffineParams
) -> tuple[GrayImage, BinaryMask]:
    """Warp image (bilinear) and mask (nearest) about the grid center."""
    if image.values.shape != mask.values.shape:
        raise ValueError(
            f"image {image.values.shape} and mask {mask.values.shape} grids differ"
        )
    center = (np.array(image.values.shape, dtype=np.float64) - 1.0) / 2.0
    inverse = np.linalg.inv(params.matrix())
    offset = center - inverse @ (center + np.asarray(params.translation))

    warped_image = ndimage.affine_transform(
        image.values, inverse, offset=offset, order=1, mode="constant", cval=0.0
    )
    warped_mask = ndimage.affine_transform(
        mask.values.astype(np.float64),
        inverse,
        offset=offset,
        order=0,
        mode="constant",
        cval=0.0,
    )
    return (
        replace(image, values=warped_image),
        replace(mask, values=warped_mask > 0.5),
    )


def random_affine(
    image: GrayImage,
    mask: BinaryMask,
    ranges: AffineRanges,
    rng: np.random.Generator,
) -> tuple[GrayImage, BinaryMask]:
    """Apply one sampled 6-DOF transform to an image/mask pair."""
    return apply_affine(image, mask, sample_affine(ranges, rng))


def fill_holes(mask: BinaryMask) -> BinaryMask:
    """Foreground every background pixel not 4-connected to the image border."""
    return replace(mask, values=ndimage.binary_fill_holes(mask.values))


def largest_component(mask: BinaryMask) -> BinaryMask:
    """Keep the largest 8-connected component; ties go to the earliest in row-major order."""
    labels, count = ndimage.label(mask.values, structure=FOREGROUND_CONNECTIVITY)
    if count == 0:
        return replace(mask, values=np.zeros_like(mask.values))
    areas = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(areas)) + 1
    return replace(mask, values=labels == keep)


def post_process(mask: BinaryMask) -> BinaryMask:
    """Fill holes, then keep the largest connected region."""
    return largest_component(fill_holes(mask))
