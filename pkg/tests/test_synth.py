"""tests.test_synth

Phantom dataset generation.
"""

from __future__ import annotations

import itertools
import logging
from pathlib import Path

import numpy as np
import pytest

from harness.dataset import MANIFEST_NAME, LabeledCase, load_cases
from harness.models import Manifest
from harness.synth import (
    MIN_PAIRWISE_DICE,
    OPERATOR_DICE,
    draw_operators,
    rasterize_star,
    synth_dataset,
)
from sunet.imageops import BinaryMask
from sunet.metrics import region_metrics


@pytest.fixture(scope="module")
def phantom(tmp_path_factory: pytest.TempPathFactory) -> tuple[Path, Manifest]:
    root = tmp_path_factory.mktemp("phantom")
    return root, synth_dataset(root, n_patients=8, seed=3)


@pytest.fixture(scope="module")
def phantom_cases(phantom: tuple[Path, Manifest]) -> list[LabeledCase]:
    return load_cases(phantom[0])


def _tree(root: Path) -> dict[str, bytes]:
    return {
        str(path.relative_to(root)): path.read_bytes()
        for path in sorted(root.rglob("*"))
        if path.is_file()
    }


def test_same_seed_gives_identical_files(tmp_path: Path) -> None:
    synth_dataset(tmp_path / "a", n_patients=2, images_per_patient=2, seed=7)
    synth_dataset(tmp_path / "b", n_patients=2, images_per_patient=2, seed=7)
    first, second = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert MANIFEST_NAME in first
    assert len(first) == 1 + 4 * 4
    assert first == second


def test_different_seed_changes_images(tmp_path: Path) -> None:
    synth_dataset(tmp_path / "a", n_patients=2, images_per_patient=1, seed=1)
    synth_dataset(tmp_path / "b", n_patients=2, images_per_patient=1, seed=2)
    assert _tree(tmp_path / "a") != _tree(tmp_path / "b")


def test_manifest_layout(phantom: tuple[Path, Manifest]) -> None:
    root, manifest = phantom
    assert len(manifest.entries) == 24
    assert manifest.patient_ids() == [f"P{i:02d}" for i in range(1, 9)]
    entry = manifest.entries[0]
    assert entry.image_id == "P01_0"
    assert entry.image_path == "images/P01_0.pgm"
    assert entry.mask_paths == (
        "masks/op1/P01_0.pgm",
        "masks/op2/P01_0.pgm",
        "masks/op3/P01_0.pgm",
    )
    for entry in manifest.entries:
        assert entry.spacing_row_mm == entry.spacing_col_mm > 0.0
        assert (root / entry.image_path).exists()
    stages = [entry.stage for entry in manifest.entries if entry.patient_id == "P02"]
    assert sorted(stages) == ["contraction", "rest", "valsalva"]


def test_operator_masks_agree_pairwise(phantom_cases: list[LabeledCase]) -> None:
    for case in phantom_cases:
        for a, b in itertools.combinations(case.operator_masks, 2):
            assert region_metrics(a, b).dice >= MIN_PAIRWISE_DICE, case.image_id


def test_stage_area_ordering(phantom_cases: list[LabeledCase]) -> None:
    areas: dict[str, list[float]] = {"contraction": [], "rest": [], "valsalva": []}
    for case in phantom_cases:
        areas[case.stage].extend(mask.area_pixels for mask in case.operator_masks)
    mean = {stage: float(np.mean(values)) for stage, values in areas.items()}
    assert mean["valsalva"] > mean["rest"] > mean["contraction"]


def test_images_are_darker_inside_the_hiatus(phantom_cases: list[LabeledCase]) -> None:
    for case in phantom_cases:
        inside = case.operator_masks[0].values
        assert case.image.values[inside].mean() < case.image.values[~inside].mean()


def test_operator_draws_stay_in_band(rng: np.random.Generator) -> None:
    radii = np.full(16, 12.0)
    truth = rasterize_star(radii, (31.5, 31.5), (64, 64))
    masks = draw_operators(radii, (31.5, 31.5), (64, 64), truth, rng)
    assert len(masks) == 3
    for mask in masks:
        assert region_metrics(BinaryMask(mask), BinaryMask(truth)).dice >= 0.8


def test_needs_two_patients(tmp_path: Path) -> None:
    with pytest.raises(ValueError, match="n_patients"):
        synth_dataset(tmp_path, n_patients=1)


def test_fallback_outlines_are_checked_against_the_band(
    rng: np.random.Generator,
    monkeypatch: pytest.MonkeyPatch,
    caplog: pytest.LogCaptureFixture,
) -> None:
    monkeypatch.setattr("harness.synth._operator_mask", lambda *args: None)

    radii = np.full(16, 20.0)
    large = rasterize_star(radii, (31.5, 31.5), (64, 64))
    with caplog.at_level(logging.WARNING):
        masks = draw_operators(radii, (31.5, 31.5), (64, 64), large, rng, "large")
    assert "using morphological outlines" in caplog.text
    assert "outside the operator band" not in caplog.text
    for mask in masks:
        dice = region_metrics(BinaryMask(mask), BinaryMask(large)).dice
        assert OPERATOR_DICE[0] <= dice <= OPERATOR_DICE[1]

    caplog.clear()
    radii = np.full(16, 3.0)
    small = rasterize_star(radii, (7.5, 7.5), (16, 16))
    with caplog.at_level(logging.WARNING):
        draw_operators(radii, (7.5, 7.5), (16, 16), small, rng, "small")
    assert "small: morphological outlines are outside the operator band" in caplog.text
