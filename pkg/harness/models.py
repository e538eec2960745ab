"""harness.models

Pydantic models of the on-disk dataset manifest.
"""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator

Stage = Literal["rest", "valsalva", "contraction"]


class ManifestEntry(BaseModel):
    """One labeled image: paths are relative to the manifest directory."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    patient_id: str = Field(min_length=1)
    image_id: str = Field(min_length=1)
    stage: Stage
    image_path: str
    mask_paths: tuple[str, str, str]
    spacing_row_mm: float = Field(gt=0.0)
    spacing_col_mm: float = Field(gt=0.0)

    @property
    def spacing(self) -> tuple[float, float]:
        return self.spacing_row_mm, self.spacing_col_mm


class Manifest(BaseModel):
    """All labeled images of a dataset."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    entries: tuple[ManifestEntry, ...]
    seed: int | None = None

    @field_validator("entries")
    @classmethod
    def _unique_images(cls, entries: tuple[ManifestEntry, ...]) -> tuple[ManifestEntry, ...]:
        seen: set[tuple[str, str]] = set()
        for entry in entries:
            key = (entry.patient_id, entry.image_id)
            if key in seen:
                raise ValueError(f"duplicate image {entry.image_id} for patient {entry.patient_id}")
            seen.add(key)
        return entries

    def patient_ids(self) -> list[str]:
        return sorted({entry.patient_id for entry in self.entries})
