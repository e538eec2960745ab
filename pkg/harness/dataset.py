"""harness.dataset

Labeled cases read through the JSON manifest, and the preprocessing that
brings them onto the canvas and network grids.

Layout: <root>/manifest.json, <root>/images/*.pgm, <root>/masks/op{1,2,3}/*.pgm.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from harness.models import Manifest, ManifestEntry, Stage
from sunet.imageops import BinaryMask, GrayImage, crop_or_pad, resize_bilinear
from sunet.pgm import read_image, read_mask

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class LabeledCase:
    """One image with the masks of the three operators."""

    patient_id: str
    image_id: str
    stage: Stage
    image: GrayImage
    operator_masks: tuple[BinaryMask, BinaryMask, BinaryMask]

    def __post_init__(self) -> None:
        if len(self.operator_masks) != 3:
            raise ValueError(
                f"{self.image_id}: expected 3 operator masks, got {len(self.operator_masks)}"
            )
        for index, mask in enumerate(self.operator_masks, start=1):
            if mask.values.shape != self.image.values.shape:
                raise ValueError(
                    f"{self.image_id}: op{index} mask {mask.values.shape} does not "
                    f"match image {self.image.values.shape}"
                )
            if mask.is_empty():
                raise ValueError(f"{self.image_id}: op{index} mask is empty")

    @property
    def spacing(self) -> tuple[float, float]:
        return self.image.spacing


def load_manifest(path: Path) -> Manifest:
    """Parse a manifest file, or the manifest inside a dataset directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return Manifest.model_validate_json(path.read_text(encoding="utf-8"))


def write_manifest(path: Path, manifest: Manifest) -> None:
    """Write the manifest as indented JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")


def load_case(entry: ManifestEntry, root: Path) -> LabeledCase:
    """Read one image and its operator masks; missing files raise FileNotFoundError."""
    image_path = root / entry.image_path
    if not image_path.exists():
        raise FileNotFoundError(f"image not found: {image_path}")
    masks = []
    for mask_path in entry.mask_paths:
        if not (root / mask_path).exists():
            raise FileNotFoundError(f"mask not found: {root / mask_path}")
        masks.append(read_mask(root / mask_path, entry.spacing))
    return LabeledCase(
        patient_id=entry.patient_id,
        image_id=entry.image_id,
        stage=entry.stage,
        image=read_image(image_path, entry.spacing),
        operator_masks=tuple(masks),
    )


def load_cases(manifest_path: Path) -> list[LabeledCase]:
    """Read every case of the manifest; paths resolve against its directory."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    manifest = load_manifest(manifest_path)
    return [load_case(entry, manifest_path.parent) for entry in manifest.entries]


@dataclass(frozen=True)
class PreparedCase:
    """A case on the canvas grid (evaluation) and the network grid (training)."""

    case: LabeledCase
    canvas_masks: tuple[BinaryMask, ...]
    network_image: np.ndarray
    network_masks: np.ndarray

    @property
    def canvas_shape(self) -> tuple[int, int]:
        return self.canvas_masks[0].values.shape


def prepare_case(
    case: LabeledCase, canvas: tuple[int, int], network_size: tuple[int, int]
) -> PreparedCase:
    """Crop/pad to ``canvas``, then resize the image and masks to ``network_size``."""
    image = crop_or_pad(case.image, canvas)
    canvas_masks = tuple(crop_or_pad(mask, canvas) for mask in case.operator_masks)
    if canvas == network_size:
        network_image = image.values
        network_masks = np.stack([mask.values for mask in canvas_masks])
    else:
        network_image = resize_bilinear(image, network_size).values
        network_masks = np.stack(
            [resize_bilinear(mask, network_size).values for mask in canvas_masks]
        )
    return PreparedCase(
        case=case,
        canvas_masks=canvas_masks,
        network_image=network_image,
        network_masks=network_masks,
    )
