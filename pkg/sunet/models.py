"""sunet.models

Pydantic experiment configuration shared by the network, the harness and tests.
Presets and architecture names map onto these models.
"""

from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

Architecture = Literal["sunet", "sunet-dropout", "unet"]


class NetworkConfig(BaseModel):
    """Structure of the SU-Net / U-Net encoder-decoder."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    levels: int = Field(3, ge=1)
    channels: int = Field(64, ge=1)
    kernel: int = Field(2, ge=1)
    activation: Literal["selu", "batchnorm_relu"] = "selu"
    dropout_rate: float = Field(0.0, ge=0.0, lt=1.0)
    classes: Literal[2] = 2
    in_channels: int = Field(1, ge=1)


class LossConfig(BaseModel):
    """Weights of the label-smoothed soft Dice + L2 loss."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    label_smoothing: float = Field(0.1, ge=0.0, lt=1.0)
    l2_weight: float = Field(1e-5, ge=0.0)
    dice_epsilon: float = Field(1e-6, ge=0.0)


class AffineRanges(BaseModel):
    """Sampling ranges of the 6-DOF augmentation."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    rotation_deg: float = Field(10.0, ge=0.0)
    translation_px: float = Field(8.0, ge=0.0)
    scale_min: float = Field(0.9, gt=0.0)
    scale_max: float = Field(1.1, gt=0.0)
    shear: float = Field(0.1, ge=0.0)

    @model_validator(mode="after")
    def _check_scale_order(self) -> AffineRanges:
        if self.scale_min > self.scale_max:
            raise ValueError("scale_min must not exceed scale_max")
        return self


class TrainConfig(BaseModel):
    """Optimizer, sampling and bookkeeping settings of one training run."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    batch_size: int = Field(32, ge=1)
    iterations: int = Field(3000, ge=0)
    seed: int = 0
    learning_rate: float = Field(1e-4, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_epsilon: float = Field(1e-8, gt=0.0)
    augment: bool = True
    affine: AffineRanges = AffineRanges()
    checkpoint_iterations: tuple[int, ...] = (500, 1000, 1500, 2000, 2500, 3000)
    eval_every: int = Field(100, ge=0)
    log_every: int = Field(50, ge=1)


class ExperimentConfig(BaseModel):
    """Everything a cross-validation run needs besides the dataset."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    network: NetworkConfig = NetworkConfig()
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig()
    canvas: tuple[int, int] = (214, 262)
    network_size: tuple[int, int] = (107, 131)

    @model_validator(mode="after")
    def _check_grids(self) -> ExperimentConfig:
        if min(self.canvas) < 1 or min(self.network_size) < 1:
            raise ValueError("canvas and network_size extents must be >= 1")
        return self


PRESETS: dict[str, dict[str, Any]] = {
    "full": {},
    "desk": {
        "network": {"channels": 16},
        "train": {
            "iterations": 600,
            "checkpoint_iterations": [100, 200, 300, 400, 500, 600],
        },
        "canvas": [64, 64],
        "network_size": [64, 64],
    },
}

ARCHITECTURES: dict[str, dict[str, Any]] = {
    "sunet": {"activation": "selu", "dropout_rate": 0.0},
    "sunet-dropout": {"activation": "selu", "dropout_rate": 0.5},
    "unet": {"activation": "batchnorm_relu", "dropout_rate": 0.0},
}


def _deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_experiment_config(
    preset: str = "full",
    overrides: dict[str, Any] | None = None,
    architecture: Architecture | None = None,
) -> ExperimentConfig:
    """Merge a preset, user overrides and an architecture into one config."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    data = _deep_merge(PRESETS[preset], overrides or {})
    if architecture is not None:
        if architecture not in ARCHITECTURES:
            raise ValueError(
                f"unknown architecture {architecture!r}; "
                f"choose from {sorted(ARCHITECTURES)}"
            )
        data = _deep_merge(data, {"network": ARCHITECTURES[architecture]})
    return ExperimentConfig.model_validate(data)
