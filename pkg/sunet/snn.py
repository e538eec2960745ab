"""sunet.snn

Self-normalising building blocks: SELU, alpha dropout and LeCun-normal
initialization, the batch-norm + ReLU pair they replace in the baseline U-Net,
and moment tracking through a deep SELU chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from sunet.tensor import Tensor, elementwise, record

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class SeluParams:
    """SELU constants; ``scale`` is the lambda of the activation."""

    scale: float = 1.0507
    alpha: float = 1.6733

    def __post_init__(self) -> None:
        if self.scale <= 1.0 or self.alpha <= 1.0:
            raise ValueError(
                f"SELU needs scale > 1 and alpha > 1, got {self.scale}, {self.alpha}"
            )

    @property
    def saturation(self) -> float:
        return -self.scale * self.alpha


SELU = SeluParams()


def _selu_values(values: np.ndarray, params: SeluParams) -> np.ndarray:
    negative = params.scale * params.alpha * np.expm1(np.minimum(values, 0.0))
    return np.where(values > 0, params.scale * values, negative)


def _relu_values(values: np.ndarray) -> np.ndarray:
    return np.where(values > 0, values, 0.0)


def selu(x: Tensor, params: SeluParams = SELU) -> Tensor:
    """Scaled exponential linear unit; the derivative at 0 takes the lower branch."""
    values = x.values
    positive = values > 0
    tail = np.expm1(np.minimum(values, 0.0))
    scaled = params.scale * params.alpha
    out = np.where(positive, params.scale * values, scaled * tail)
    derivative = np.where(positive, params.scale, scaled * (tail + 1.0))
    return elementwise(x, out, derivative)


def relu(x: Tensor) -> Tensor:
    """Rectified linear unit with derivative 0 at the origin."""
    values = x.values
    return elementwise(x, _relu_values(values), (values > 0).astype(np.float64))


def alpha_dropout(
    x: Tensor,
    rate: float,
    training: bool,
    rng: np.random.Generator | None,
    params: SeluParams = SELU,
) -> Tensor:
    """Dropout to the SELU saturation value with a moment-preserving affine fix.

    Dropped units are set to -scale*alpha, then a*x + b restores zero mean and
    unit variance for standardized inputs. Inference mode is the identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"alpha_dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("alpha_dropout needs an rng in training mode")

    keep = 1.0 - rate
    saturation = params.saturation
    a = (keep + saturation**2 * keep * rate) ** -0.5
    b = -a * rate * saturation
    kept = rng.random(x.shape) < keep
    values = a * np.where(kept, x.values, saturation) + b
    return record(values, (x,), lambda g: (g * a * kept,))


@dataclass
class RunningStats:
    """Per-channel running mean/variance used by batch norm in inference."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int) -> RunningStats:
        return cls(mean=np.zeros(channels), var=np.ones(channels))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    training: bool,
    epsilon: float = BN_EPSILON,
) -> Tensor:
    """Per-channel normalization over batch and spatial axes, then gamma/beta."""
    if x.ndim != 4:
        raise ValueError(f"batch_norm expects a 4-D input, got {x.shape}")
    batch, channels, height, width = x.shape
    if batch == 0:
        raise ValueError("batch_norm needs a non-empty batch")
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ValueError(
            f"batch_norm gamma/beta must have shape ({channels},), "
            f"got {gamma.shape} and {beta.shape}"
        )

    axes = (0, 2, 3)
    if training:
        mean = x.values.mean(axis=axes)
        var = x.values.var(axis=axes)
        stats.mean = stats.momentum * stats.mean + (1.0 - stats.momentum) * mean
        stats.var = stats.momentum * stats.var + (1.0 - stats.momentum) * var
    else:
        mean, var = stats.mean, stats.var

    inv_std = 1.0 / np.sqrt(var + epsilon)
    normalized = (x.values - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.values[None, :, None, None] * normalized + beta.values[None, :, None, None]
    count = batch * height * width

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad_gamma = (g * normalized).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        grad_normalized = g * gamma.values[None, :, None, None]
        scale = inv_std[None, :, None, None]
        if not training:
            return grad_normalized * scale, grad_gamma, grad_beta
        grad_x = (scale / count) * (
            count * grad_normalized
            - grad_normalized.sum(axis=axes, keepdims=True)
            - normalized * (grad_normalized * normalized).sum(axis=axes, keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta

    return record(out, (x, gamma, beta), rule)


def batch_norm_relu(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    training: bool,
) -> Tensor:
    """The baseline U-Net activation that SELU replaces."""
    return relu(batch_norm(x, gamma, beta, stats, training))


def lecun_normal_init(
    shape: tuple[int, ...], fan_in: int, rng: np.random.Generator
) -> Tensor:
    """Zero-mean normal weights with variance 1/fan_in."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    values = rng.normal(0.0, math.sqrt(1.0 / fan_in), size=shape)
    return Tensor(values, requires_grad=True)


@dataclass(frozen=True)
class LayerMoments:
    """Sample moments of one layer's activations."""

    layer: int
    mean: float
    variance: float
    count: int
    iteration: int = 0


def selfnorm_moments(
    depth: int,
    width: int,
    n_samples: int,
    rng: np.random.Generator,
    activation: Literal["selu", "relu"] = "selu",
) -> list[LayerMoments]:
    """Feed standard-normal inputs through a LeCun-initialized dense chain.

    ``relu`` runs the same chain without normalization as a contrast.
    """
    if depth < 1 or width < 1 or n_samples < 1:
        raise ValueError("selfnorm_moments needs depth, width and n_samples >= 1")
    if activation not in ("selu", "relu"):
        raise ValueError(f"unknown activation {activation!r}")

    activations = rng.standard_normal((n_samples, width))
    trace = []
    for layer in range(1, depth + 1):
        weights = lecun_normal_init((width, width), fan_in=width, rng=rng).values
        pre_activation = activations @ weights
        if activation == "selu":
            activations = _selu_values(pre_activation, SELU)
        else:
            activations = _relu_values(pre_activation)
        trace.append(
            LayerMoments(
                layer=layer,
                mean=float(activations.mean()),
                variance=float(activations.var()),
                count=int(activations.size),
            )
        )
    return trace
