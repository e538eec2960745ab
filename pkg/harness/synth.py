"""harness.synth

Synthetic stand-in for the clinical data: per patient a smooth star-shaped
hiatus, scaled per exam stage, rendered as a speckled ultrasound-like image
and outlined by three operators with independent small errors.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from harness.dataset import MANIFEST_NAME, write_manifest
from harness.models import Manifest, ManifestEntry
from sunet.imageops import BinaryMask, GrayImage
from sunet.metrics import region_metrics
from sunet.pgm import write_image, write_mask

STAR_VERTICES = 16
STAGE_ORDER = ("rest", "valsalva", "contraction")
STAGE_AREA = {"contraction": 0.8, "rest": 1.0, "valsalva": 1.3}
OPERATOR_DICE = (0.88, 0.99)
MIN_PAIRWISE_DICE = 0.8
SPACING_MM = (0.54, 0.07)
MIN_SPACING_MM = 0.2

INTERIOR, EXTERIOR, RIM = 0.25, 0.65, 0.9
RIM_WIDTH = 3
SPECKLE_SHAPE = 4.0
BLUR_SIGMA = 1.0
MAX_OPERATOR_ATTEMPTS = 40


def _star_radii(rng: np.random.Generator, base: float) -> np.ndarray:
    radii = base * (1.0 + 0.25 * rng.uniform(-1.0, 1.0, STAR_VERTICES))
    return ndimage.convolve1d(radii, np.array([0.25, 0.5, 0.25]), mode="wrap")


def rasterize_star(
    radii: np.ndarray,
    center: tuple[float, float],
    size: tuple[int, int],
    rotation: float = 0.0,
    scale: float = 1.0,
) -> np.ndarray:
    """Pixels whose polar radius about ``center`` is inside the interpolated outline."""
    rows, cols = np.indices(size, dtype=np.float64)
    dy, dx = rows - center[0], cols - center[1]
    angle = np.arctan2(dy, dx) - rotation
    vertex_angles = np.arange(radii.size) * (2.0 * math.pi / radii.size)
    outline = np.interp(angle, vertex_angles, radii, period=2.0 * math.pi) * scale
    return np.hypot(dy, dx) <= outline


def render_image(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Speckled, blurred intensities: dark interior, bright rim, mid-gray outside."""
    values = np.where(mask, INTERIOR, EXTERIOR)
    rim = ndimage.binary_dilation(mask, iterations=RIM_WIDTH) & ~mask
    values[rim] = RIM
    values = values * rng.gamma(SPECKLE_SHAPE, 1.0 / SPECKLE_SHAPE, mask.shape)
    return np.clip(ndimage.gaussian_filter(values, BLUR_SIGMA), 0.0, 1.0)


def _dice(a: np.ndarray, b: np.ndarray) -> float:
    return region_metrics(BinaryMask(a), BinaryMask(b)).dice


def _operator_mask(
    radii: np.ndarray,
    center: tuple[float, float],
    size: tuple[int, int],
    truth: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray | None:
    amplitude = 1.0
    for _ in range(MAX_OPERATOR_ATTEMPTS):
        jitter = radii * (1.0 + amplitude * 0.04 * rng.standard_normal(radii.size))
        shift = amplitude * rng.standard_normal(2)
        mask = rasterize_star(
            jitter,
            (center[0] + shift[0], center[1] + shift[1]),
            size,
            rotation=amplitude * 0.03 * rng.standard_normal(),
            scale=1.0 + amplitude * 0.02 * rng.standard_normal(),
        )
        if not mask.any():
            amplitude *= 0.5
            continue
        dice = _dice(mask, truth)
        if dice < OPERATOR_DICE[0]:
            amplitude *= 0.7
        elif dice > OPERATOR_DICE[1]:
            amplitude *= 1.5
        else:
            return mask
    return None


def _fallback_operators(truth: np.ndarray) -> list[np.ndarray]:
    cross = ndimage.generate_binary_structure(2, 1)
    square = np.ones((3, 3), dtype=bool)
    return [
        ndimage.binary_dilation(truth, structure=cross),
        ndimage.binary_erosion(truth, structure=cross),
        ndimage.binary_dilation(truth, structure=square),
    ]


def _band_problems(masks: list[np.ndarray], truth: np.ndarray) -> list[str]:
    """Describe every operator Dice outside the band and every pair below the floor."""
    low, high = OPERATOR_DICE
    problems = []
    for index, mask in enumerate(masks, start=1):
        dice = _dice(mask, truth)
        if not low <= dice <= high:
            problems.append(f"op{index} vs truth {dice:.3f}")
    for i, j in ((0, 1), (0, 2), (1, 2)):
        dice = _dice(masks[i], masks[j])
        if dice < MIN_PAIRWISE_DICE:
            problems.append(f"op{i + 1} vs op{j + 1} {dice:.3f}")
    return problems


def draw_operators(
    radii: np.ndarray,
    center: tuple[float, float],
    size: tuple[int, int],
    truth: np.ndarray,
    rng: np.random.Generator,
    label: str = "",
) -> list[np.ndarray]:
    """Three operator masks, each within the Dice band of the truth and pairwise >= 0.8."""
    for _ in range(MAX_OPERATOR_ATTEMPTS):
        masks = [_operator_mask(radii, center, size, truth, rng) for _ in range(3)]
        if any(mask is None for mask in masks):
            continue
        pairwise = [_dice(masks[i], masks[j]) for i, j in ((0, 1), (0, 2), (1, 2))]
        if min(pairwise) >= MIN_PAIRWISE_DICE:
            return masks
    logging.warning(f"{label}: operator draws out of band, using morphological outlines")
    masks = _fallback_operators(truth)
    problems = _band_problems(masks, truth)
    if problems:
        logging.warning(
            f"{label}: morphological outlines are outside the operator band: "
            f"{', '.join(problems)}"
        )
    return masks


def synth_dataset(
    root: Path,
    n_patients: int,
    images_per_patient: int = 3,
    seed: int = 0,
    size: tuple[int, int] = (64, 64),
) -> Manifest:
    """Write a phantom dataset under ``root`` and return its manifest."""
    if n_patients < 2:
        raise ValueError(f"n_patients must be >= 2, got {n_patients}")
    if images_per_patient < 1:
        raise ValueError(f"images_per_patient must be >= 1, got {images_per_patient}")
    root = Path(root)
    base = 0.22 * min(size)
    entries = []
    for index, patient_seed in enumerate(np.random.SeedSequence(seed).spawn(n_patients)):
        rng = np.random.default_rng(patient_seed)
        patient_id = f"P{index + 1:02d}"
        radii = _star_radii(rng, base)
        row_mm = max(MIN_SPACING_MM, float(rng.normal(*SPACING_MM)))
        spacing = (row_mm, row_mm)
        for image_index in range(images_per_patient):
            stage = STAGE_ORDER[image_index % len(STAGE_ORDER)]
            image_id = f"{patient_id}_{image_index}"
            center = (
                (size[0] - 1) / 2.0 + rng.uniform(-2.0, 2.0),
                (size[1] - 1) / 2.0 + rng.uniform(-2.0, 2.0),
            )
            stage_radii = radii * math.sqrt(STAGE_AREA[stage])
            truth = rasterize_star(stage_radii, center, size)
            image = GrayImage(render_image(truth, rng), spacing)
            operators = draw_operators(stage_radii, center, size, truth, rng, image_id)

            image_path = f"images/{image_id}.pgm"
            write_image(root / image_path, image)
            mask_paths = []
            for operator, values in enumerate(operators, start=1):
                mask_path = f"masks/op{operator}/{image_id}.pgm"
                write_mask(root / mask_path, BinaryMask(values, spacing))
                mask_paths.append(mask_path)
            entries.append(
                ManifestEntry(
                    patient_id=patient_id,
                    image_id=image_id,
                    stage=stage,
                    image_path=image_path,
                    mask_paths=tuple(mask_paths),
                    spacing_row_mm=spacing[0],
                    spacing_col_mm=spacing[1],
                )
            )

    manifest = Manifest(entries=tuple(entries), seed=seed)
    write_manifest(root / MANIFEST_NAME, manifest)
    logging.info(
        f"Synthesized {len(entries)} images for {n_patients} patients under {root}"
    )
    return manifest
