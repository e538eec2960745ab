"""harness.validation

Numerical self-checks behind the grad-check and selfnorm-check subcommands.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from sunet.models import LossConfig, NetworkConfig
from sunet.network import Network, build_network, dice_smooth_loss
from sunet.snn import LayerMoments, RunningStats, batch_norm_relu, selfnorm_moments, selu
from sunet.tensor import Tensor, conv2d, conv2d_transpose, grad_check, max_pool2, softmax

GRAD_TOLERANCE = 1e-5
SELFNORM_MEAN_BOUND = 0.2
SELFNORM_VARIANCE_BAND = (0.5, 2.0)

Check = tuple[Callable[[Tensor], Tensor], np.ndarray]


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    max_relative_error: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < GRAD_TOLERANCE


def _projected(out: Tensor, weights: np.ndarray) -> Tensor:
    # Fixed random weights turn any output into a scalar with no symmetric cancellation.
    return (out * Tensor(weights)).sum()


def _op_checks(rng: np.random.Generator) -> dict[str, Check]:
    kernel = Tensor(rng.standard_normal((3, 2, 2, 2)))
    bias = Tensor(rng.standard_normal(3))
    up_kernel = Tensor(rng.standard_normal((2, 3, 2, 2)))
    gamma = Tensor(rng.uniform(0.5, 1.5, 2))
    beta = Tensor(rng.standard_normal(2))
    masks = rng.random((2, 4, 4)) < 0.5
    w_conv = rng.standard_normal((2, 3, 4, 4))
    w_up = rng.standard_normal((2, 3, 6, 6))
    w_pool = rng.standard_normal((2, 2, 2, 2))
    w_selu = rng.standard_normal((2, 2, 4, 4))
    w_bn = rng.standard_normal((2, 2, 4, 4))

    def conv(x: Tensor) -> Tensor:
        return _projected(conv2d(x, kernel, bias, padding=(0, 1, 0, 1)), w_conv)

    def conv_t(x: Tensor) -> Tensor:
        return _projected(conv2d_transpose(x, up_kernel, None, stride=2), w_up)

    def pool(x: Tensor) -> Tensor:
        out, _ = max_pool2(x)
        return _projected(out, w_pool)

    def selu_only(x: Tensor) -> Tensor:
        return _projected(selu(x), w_selu)

    def bn_relu(x: Tensor) -> Tensor:
        out = batch_norm_relu(x, gamma, beta, RunningStats.fresh(2), training=True)
        return _projected(out, w_bn)

    def loss(x: Tensor) -> Tensor:
        return dice_smooth_loss(softmax(x, axis=1), masks, LossConfig())

    # Inputs stay away from the SELU kink and from max-pool ties.
    signs = rng.choice([-1.0, 1.0], (2, 2, 4, 4))
    away_from_zero = signs * rng.uniform(0.2, 2.0, (2, 2, 4, 4))
    distinct = rng.permutation(64).reshape(2, 2, 4, 4) * 0.1
    return {
        "conv2d": (conv, rng.standard_normal((2, 2, 4, 4))),
        "conv2d_transpose": (conv_t, rng.standard_normal((2, 2, 3, 3))),
        "max_pool2": (pool, distinct),
        "selu": (selu_only, away_from_zero),
        "batch_norm_relu": (bn_relu, rng.standard_normal((2, 2, 4, 4))),
        "dice_smooth_loss": (loss, rng.standard_normal((2, 2, 4, 4))),
    }


def _network_checks(rng: np.random.Generator) -> dict[str, Check]:
    net = build_network(NetworkConfig(levels=1, channels=4), rng)
    images = rng.standard_normal((2, 1, 8, 8))
    masks = rng.random((2, 8, 8)) < 0.5
    loss_cfg = LossConfig()
    kernel_name = "enc0.conv0.kernel"

    def through_input(x: Tensor) -> Tensor:
        return dice_smooth_loss(net.forward(x), masks, loss_cfg)

    def through_kernel(k: Tensor) -> Tensor:
        swapped = Network(net.config, {**net.parameters, kernel_name: k}, net.running_stats)
        return dice_smooth_loss(
            swapped.forward(images), masks, loss_cfg, swapped.parameter_list()
        )

    return {
        "sunet_input": (through_input, images),
        "sunet_kernel": (through_kernel, net.parameters[kernel_name].values.copy()),
    }


def gradient_suite(seed: int = 0) -> list[GradCheckResult]:
    """Tape gradients against central differences for every op and a 1-level 8x8 SU-Net."""
    rng = np.random.default_rng(seed)
    checks = {**_op_checks(rng), **_network_checks(rng)}
    return [
        GradCheckResult(name, grad_check(f, x)) for name, (f, x) in checks.items()
    ]


@dataclass(frozen=True)
class SelfNormReport:
    selu: list[LayerMoments]
    relu: list[LayerMoments]

    @staticmethod
    def in_band(moments: LayerMoments) -> bool:
        low, high = SELFNORM_VARIANCE_BAND
        return abs(moments.mean) < SELFNORM_MEAN_BOUND and low <= moments.variance <= high

    @property
    def selu_stable(self) -> bool:
        return all(self.in_band(moments) for moments in self.selu)

    @property
    def relu_leaves_band(self) -> bool:
        return not self.in_band(self.relu[-1])


def selfnorm_check(
    depth: int = 20, width: int = 128, n_samples: int = 100_000, seed: int = 0
) -> SelfNormReport:
    """SELU chain moments next to the unnormalized ReLU contrast on the same seed."""
    return SelfNormReport(
        selu=selfnorm_moments(depth, width, n_samples, np.random.default_rng(seed), "selu"),
        relu=selfnorm_moments(depth, width, n_samples, np.random.default_rng(seed), "relu"),
    )
