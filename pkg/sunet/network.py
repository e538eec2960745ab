"""sunet.network

SU-Net / U-Net construction, the label-smoothed soft Dice loss, Adam, and the
training step. The two architectures differ only in the activation block.
"""

from __future__ import annotations

import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass

import numpy as np

from sunet.models import LossConfig, NetworkConfig
from sunet.snn import (
    RunningStats,
    alpha_dropout,
    batch_norm_relu,
    lecun_normal_init,
    selu,
)
from sunet.tensor import (
    Tape,
    Tensor,
    backward,
    concat_channels,
    conv2d,
    conv2d_transpose,
    max_pool2,
    pad_to,
    record,
    same_padding,
    softmax,
    sum_of_squares,
    zero_grad,
)

UP_KERNEL = 2
UP_STRIDE = 2
PREDICT_CHUNK = 16


class TrainingDivergedError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv", "up" or "head"
    in_channels: int
    out_channels: int
    kernel: int


def layer_specs(cfg: NetworkConfig) -> Iterator[LayerSpec]:
    """Parameterized layers in forward order; parameters are drawn in this order."""
    width = cfg.channels
    for level in range(cfg.levels):
        first_in = cfg.in_channels if level == 0 else width
        yield LayerSpec(f"enc{level}.conv0", "conv", first_in, width, cfg.kernel)
        yield LayerSpec(f"enc{level}.conv1", "conv", width, width, cfg.kernel)
    yield LayerSpec("bottleneck.conv0", "conv", width, width, cfg.kernel)
    yield LayerSpec("bottleneck.conv1", "conv", width, width, cfg.kernel)
    for stage in range(cfg.levels):
        yield LayerSpec(f"dec{stage}.up", "up", width, width, UP_KERNEL)
        yield LayerSpec(f"dec{stage}.conv0", "conv", 2 * width, width, cfg.kernel)
        yield LayerSpec(f"dec{stage}.conv1", "conv", width, width, cfg.kernel)
        if stage == cfg.levels - 1:
            yield LayerSpec(f"dec{stage}.conv2", "conv", width, width, cfg.kernel)
    yield LayerSpec("head", "head", width, cfg.classes, 1)


def check_input_extent(cfg: NetworkConfig, height: int, width: int) -> None:
    """Fail early when pooling would shrink a feature map below 1 pixel."""
    current_h, current_w = height, width
    for level in range(cfg.levels):
        if current_h < 2 or current_w < 2:
            raise ValueError(
                f"input {height}x{width} is too small for {cfg.levels} levels: "
                f"extent {current_h}x{current_w} cannot be pooled at level {level}"
            )
        current_h, current_w = current_h // 2, current_w // 2


class Network:
    """Encoder-decoder with skip concatenation and a two-class softmax head."""

    def __init__(
        self,
        config: NetworkConfig,
        parameters: dict[str, Tensor],
        running_stats: dict[str, RunningStats] | None = None,
    ) -> None:
        self.config = config
        self.parameters = parameters
        self.running_stats = running_stats or {}

    def parameter_list(self) -> list[Tensor]:
        return list(self.parameters.values())

    def parameter_count(self) -> int:
        return sum(parameter.values.size for parameter in self.parameters.values())

    def forward(
        self,
        images: Tensor | np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Per-pixel class probabilities of shape [B, classes, H, W]."""
        probs, _ = self._run(images, training, rng)
        return probs

    def last_block_activations(self, images: Tensor | np.ndarray) -> np.ndarray:
        """Activations after the final activation of the last decoder block."""
        _, features = self._run(images, training=False, rng=None)
        return features.values

    def _run(
        self,
        images: Tensor | np.ndarray,
        training: bool,
        rng: np.random.Generator | None,
    ) -> tuple[Tensor, Tensor]:
        x = images if isinstance(images, Tensor) else Tensor(images)
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(
                f"network input must be [B, {cfg.in_channels}, H, W], got {x.shape}"
            )
        check_input_extent(cfg, x.shape[2], x.shape[3])
        if training and cfg.dropout_rate > 0 and rng is None:
            raise ValueError("training with dropout needs an rng")

        skips = []
        for level in range(cfg.levels):
            x = self._block(f"enc{level}", x, 2, training, rng)
            skips.append(x)
            x, _ = max_pool2(x)
        x = self._block("bottleneck", x, 2, training, rng)

        for stage in range(cfg.levels):
            skip = skips[cfg.levels - 1 - stage]
            up = conv2d_transpose(
                x,
                self.parameters[f"dec{stage}.up.kernel"],
                self.parameters[f"dec{stage}.up.bias"],
                stride=UP_STRIDE,
            )
            up = pad_to(up, skip.shape[2], skip.shape[3])
            x = concat_channels(skip, up)
            convs = 3 if stage == cfg.levels - 1 else 2
            x = self._block(f"dec{stage}", x, convs, training, rng)

        logits = conv2d(x, self.parameters["head.kernel"], self.parameters["head.bias"])
        return softmax(logits, axis=1), x

    def _block(
        self,
        prefix: str,
        x: Tensor,
        convs: int,
        training: bool,
        rng: np.random.Generator | None,
    ) -> Tensor:
        cfg = self.config
        padding = same_padding(cfg.kernel, cfg.kernel)
        for index in range(convs):
            name = f"{prefix}.conv{index}"
            x = conv2d(
                x,
                self.parameters[f"{name}.kernel"],
                self.parameters[f"{name}.bias"],
                padding=padding,
            )
            if cfg.activation == "selu":
                x = selu(x)
                if cfg.dropout_rate > 0:
                    x = alpha_dropout(x, cfg.dropout_rate, training, rng)
            else:
                x = batch_norm_relu(
                    x,
                    self.parameters[f"{name}.gamma"],
                    self.parameters[f"{name}.beta"],
                    self.running_stats[name],
                    training,
                )
        return x


def build_network(cfg: NetworkConfig, rng: np.random.Generator) -> Network:
    """Create an SU-Net (selu) or U-Net (batchnorm_relu) with LeCun-normal kernels.

    Batch-norm gamma/beta are deterministic, so both activations consume the
    rng identically and share their kernels for a given seed.
    """
    if cfg.levels < 1:
        raise ValueError(f"levels must be >= 1, got {cfg.levels}")

    parameters: dict[str, Tensor] = {}
    running_stats: dict[str, RunningStats] = {}
    for spec in layer_specs(cfg):
        k = spec.kernel
        if spec.kind == "up":
            # Stride equals kernel, so each output pixel sees one input pixel.
            shape = (spec.in_channels, spec.out_channels, k, k)
            fan_in = spec.in_channels
        else:
            shape = (spec.out_channels, spec.in_channels, k, k)
            fan_in = spec.in_channels * k * k
        parameters[f"{spec.name}.kernel"] = lecun_normal_init(shape, fan_in, rng)
        parameters[f"{spec.name}.bias"] = Tensor(
            np.zeros(spec.out_channels), requires_grad=True
        )
        if spec.kind == "conv" and cfg.activation == "batchnorm_relu":
            parameters[f"{spec.name}.gamma"] = Tensor(
                np.ones(spec.out_channels), requires_grad=True
            )
            parameters[f"{spec.name}.beta"] = Tensor(
                np.zeros(spec.out_channels), requires_grad=True
            )
            running_stats[spec.name] = RunningStats.fresh(spec.out_channels)

    for name, parameter in parameters.items():
        parameter.name = name
    return Network(cfg, parameters, running_stats)


def soft_dice(pred: Tensor, target: np.ndarray, epsilon: float) -> Tensor:
    """Mean over batch and classes of 2*sum(p*y) / (sum(p^2) + sum(y^2) + eps)."""
    if pred.shape != target.shape:
        raise ValueError(
            f"soft_dice shape mismatch: prediction {pred.shape}, target {target.shape}"
        )
    p = pred.values
    overlap = (p * target).sum(axis=(2, 3))
    denominator = (p * p).sum(axis=(2, 3)) + (target * target).sum(axis=(2, 3)) + epsilon
    dice = 2.0 * overlap / denominator

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        den = denominator[:, :, None, None]
        grad = 2.0 * target / den - 4.0 * overlap[:, :, None, None] * p / den**2
        return (g * grad / dice.size,)

    return record(np.array(dice.mean()), (pred,), rule)


def smooth_targets(masks: np.ndarray, label_smoothing: float) -> np.ndarray:
    """Two-class one-hot targets pulled towards 1/2 by ``label_smoothing``."""
    foreground = np.asarray(masks, dtype=np.float64)
    one_hot = np.stack([1.0 - foreground, foreground], axis=1)
    return one_hot * (1.0 - label_smoothing) + label_smoothing / 2.0


def dice_smooth_loss(
    pred: Tensor,
    target: np.ndarray,
    cfg: LossConfig,
    parameters: Sequence[Tensor] = (),
) -> Tensor:
    """(1 - soft Dice against smoothed targets) + l2_weight * sum(theta^2)."""
    if not 0.0 <= cfg.label_smoothing < 1.0:
        raise ValueError(
            f"label_smoothing must lie in [0, 1), got {cfg.label_smoothing}"
        )
    if pred.ndim != 4 or pred.shape[1] != 2:
        raise ValueError(f"prediction must be [B, 2, H, W], got {pred.shape}")
    expected = (pred.shape[0],) + pred.shape[2:]
    if np.shape(target) != expected:
        raise ValueError(
            f"target masks must have shape {expected}, got {np.shape(target)}"
        )

    smoothed = smooth_targets(target, cfg.label_smoothing)
    loss = 1.0 - soft_dice(pred, smoothed, cfg.dice_epsilon)
    if cfg.l2_weight > 0 and parameters:
        loss = loss + cfg.l2_weight * sum_of_squares(list(parameters))
    return loss


@dataclass
class AdamState:
    """Bias-corrected Adam moments for an ordered parameter list."""

    first: list[np.ndarray]
    second: list[np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_parameters(
        cls,
        parameters: Sequence[Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ) -> AdamState:
        return cls(
            first=[np.zeros_like(parameter.values) for parameter in parameters],
            second=[np.zeros_like(parameter.values) for parameter in parameters],
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(
    parameters: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState
) -> AdamState:
    """Apply one Adam update in place and return the advanced state."""
    if len(parameters) != len(grads) or len(parameters) != len(state.first):
        raise ValueError(
            f"adam_step got {len(parameters)} parameters, {len(grads)} gradients "
            f"and state for {len(state.first)}"
        )
    for parameter, grad in zip(parameters, grads, strict=True):
        if grad.shape != parameter.shape:
            raise ValueError(
                f"gradient shape {grad.shape} does not match parameter "
                f"{parameter.name or ''} shape {parameter.shape}"
            )
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(
                f"non-finite gradient for parameter {parameter.name or '?'} "
                f"at step {state.step + 1}"
            )

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for parameter, grad, first, second in zip(
        parameters, grads, state.first, state.second, strict=True
    ):
        first *= state.beta1
        first += (1.0 - state.beta1) * grad
        second *= state.beta2
        second += (1.0 - state.beta2) * grad * grad
        parameter.values -= (
            state.lr * (first / correction1) / (np.sqrt(second / correction2) + state.epsilon)
        )
    return state


def train_step(
    net: Network,
    batch: tuple[np.ndarray, np.ndarray],
    loss_cfg: LossConfig,
    adam: AdamState,
    rng: np.random.Generator | None = None,
) -> float:
    """Forward, loss, backward and one Adam update; returns the loss value."""
    images, masks = batch
    parameters = net.parameter_list()
    zero_grad(parameters)
    with Tape() as tape:
        probs = net.forward(images, training=True, rng=rng)
        loss = dice_smooth_loss(probs, masks, loss_cfg, parameters)
    value = float(loss.values)
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss at step {adam.step + 1}")

    gradients = backward(loss, tape)
    grads = [gradients.get(p, np.zeros_like(p.values)) for p in parameters]
    adam_step(parameters, grads, adam)
    return value


def predict_masks(net: Network, images: np.ndarray) -> np.ndarray:
    """Foreground masks [B, H, W] from the argmax over the two classes."""
    masks = []
    for start in range(0, images.shape[0], PREDICT_CHUNK):
        probs = net.forward(images[start : start + PREDICT_CHUNK]).values
        masks.append(probs.argmax(axis=1) == 1)
    if not masks:
        return np.zeros((0,) + images.shape[2:], dtype=bool)
    return np.concatenate(masks, axis=0)
