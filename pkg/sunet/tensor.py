"""sunet.tensor

Minimal dense-tensor reverse-mode differentiation for the segmentation network.
Operations record themselves on the active Tape; without one they only compute.
"""

from __future__ import annotations

import contextvars
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BackwardRule = Callable[[np.ndarray], Sequence[np.ndarray | None]]
Padding = tuple[int, int, int, int]

_active_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "active_tape", default=None
)


class Tensor:
    """Dense float64 array that can take part in reverse-mode differentiation."""

    # numpy scalars on the left must defer to the reflected Tensor operators.
    __array_ufunc__ = None

    def __init__(
        self, values: object, requires_grad: bool = False, name: str | None = None
    ) -> None:
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            _require_same_shape(self, other, "add")
            return record(self.values + other.values, (self, other), lambda g: (g, g))
        return record(self.values + other, (self,), lambda g: (g,))

    __radd__ = __add__

    def __mul__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            _require_same_shape(self, other, "multiply")
            return record(
                self.values * other.values,
                (self, other),
                lambda g: (g * other.values, g * self.values),
            )
        return record(self.values * other, (self,), lambda g: (g * other,))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return self * -1.0

    def __sub__(self, other: Tensor | float) -> Tensor:
        return self + (-other)

    def __rsub__(self, other: float) -> Tensor:
        return (-self) + other

    def sum(self) -> Tensor:
        shape = self.shape
        return record(
            np.array(self.values.sum()),
            (self,),
            lambda g: (np.broadcast_to(g, shape).copy(),),
        )


@dataclass(frozen=True)
class TapeEntry:
    """One recorded operation: its inputs, its output and the backward rule."""

    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


class Tape:
    """Ordered record of differentiable operations executed inside the context."""

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []
        self._token: contextvars.Token | None = None

    def __enter__(self) -> Tape:
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, type_, value, traceback) -> None:
        del type_, value, traceback
        if self._token is not None:
            _active_tape.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.entries)


def record(
    values: np.ndarray, inputs: Sequence[Tensor], rule: BackwardRule
) -> Tensor:
    """Wrap an operation result and record it when an input needs a gradient."""
    tape = _active_tape.get()
    needs_grad = tape is not None and any(item.requires_grad for item in inputs)
    output = Tensor(values, requires_grad=needs_grad)
    if needs_grad:
        tape.entries.append(TapeEntry(tuple(inputs), output, rule))
    return output


def elementwise(x: Tensor, values: np.ndarray, derivative: np.ndarray) -> Tensor:
    """Record an elementwise map given its value and pointwise derivative."""
    return record(values, (x,), lambda g: (g * derivative,))


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(loss)=1 through the tape in reverse order.

    Gradients are accumulated into ``.grad`` of every leaf that requires one
    and returned keyed by tensor. Intermediate gradients are discarded.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    produced: set[int] = set()

    for entry in reversed(tape.entries):
        produced.add(id(entry.output))
        upstream = pending.pop(id(entry.output), None)
        if upstream is None:
            continue
        for tensor, grad in zip(entry.inputs, entry.backward(upstream), strict=True):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            tensors[key] = tensor
            pending[key] = pending[key] + grad if key in pending else grad

    gradients: dict[Tensor, np.ndarray] = {}
    for key, grad in pending.items():
        tensor = tensors[key]
        if key in produced or not tensor.requires_grad:
            continue
        tensor.grad = grad if tensor.grad is None else tensor.grad + grad
        gradients[tensor] = grad
    return gradients


def zero_grad(parameters: Sequence[Tensor]) -> None:
    """Clear accumulated gradients before the next backward pass."""
    for parameter in parameters:
        parameter.grad = None


def same_padding(kernel_height: int, kernel_width: int) -> Padding:
    """Stride-1 padding that keeps the spatial size; extra pixel goes bottom/right."""
    top = (kernel_height - 1) // 2
    left = (kernel_width - 1) // 2
    return top, kernel_height - 1 - top, left, kernel_width - 1 - left


def _patch_rows(padded: np.ndarray, kernel_height: int, kernel_width: int) -> np.ndarray:
    """im2col: one row of flattened (C_in, kh, kw) patch values per output pixel."""
    windows = sliding_window_view(padded, (kernel_height, kernel_width), axis=(2, 3))
    batch, channels, out_height, out_width = windows.shape[:4]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(
        batch * out_height * out_width, channels * kernel_height * kernel_width
    )


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    padding: Padding = (0, 0, 0, 0),
) -> Tensor:
    """Stride-1 cross-correlation of [B,C_in,H,W] with a [C_out,C_in,kh,kw] kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}"
        )
    batch, channels, height, width = x.shape
    out_channels, in_channels, kernel_height, kernel_width = kernel.shape
    if channels != in_channels:
        raise ValueError(
            f"conv2d channel mismatch: input has {channels} channels (dimension 1) "
            f"but kernel expects {in_channels}"
        )
    if bias is not None and bias.shape != (out_channels,):
        raise ValueError(
            f"conv2d bias must have shape ({out_channels},), got {bias.shape}"
        )
    top, bottom, left, right = padding
    if height + top + bottom < kernel_height:
        raise ValueError(
            f"conv2d kernel height {kernel_height} exceeds padded input height "
            f"{height + top + bottom}"
        )
    if width + left + right < kernel_width:
        raise ValueError(
            f"conv2d kernel width {kernel_width} exceeds padded input width "
            f"{width + left + right}"
        )

    padded = np.pad(x.values, ((0, 0), (0, 0), (top, bottom), (left, right)))
    out_height = padded.shape[2] - kernel_height + 1
    out_width = padded.shape[3] - kernel_width + 1
    # Kept for the backward rule: the kernel gradient needs the same patches.
    cols = _patch_rows(padded, kernel_height, kernel_width)
    weights = kernel.values.reshape(out_channels, -1)
    rows = cols @ weights.T
    if bias is not None:
        rows += bias.values
    out = np.ascontiguousarray(
        rows.reshape(batch, out_height, out_width, out_channels).transpose(0, 3, 1, 2)
    )

    def rule(g: np.ndarray) -> list[np.ndarray]:
        g_channels = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(out_channels, -1)
        grad_kernel = (g_channels @ cols).reshape(kernel.shape)
        grad_cols = (weights.T @ g_channels).reshape(
            channels, kernel_height, kernel_width, batch, out_height, out_width
        )
        grad_padded = np.zeros_like(padded)
        for i in range(kernel_height):
            for j in range(kernel_width):
                grad_padded[:, :, i : i + out_height, j : j + out_width] += (
                    grad_cols[:, i, j].transpose(1, 0, 2, 3)
                )
        grads = [
            grad_padded[:, :, top : top + height, left : left + width],
            grad_kernel,
        ]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record(out, inputs, rule)


def conv2d_transpose(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 2,
) -> Tensor:
    """Transposed convolution: each input pixel scatters kernel*value at ``stride``."""
    if stride < 1:
        raise ValueError(f"conv2d_transpose stride must be >= 1, got {stride}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(
            "conv2d_transpose expects 4-D input and kernel, "
            f"got {x.shape} and {kernel.shape}"
        )
    _, channels, _, _ = x.shape
    in_channels, out_channels, kernel_height, kernel_width = kernel.shape
    if channels != in_channels:
        raise ValueError(
            f"conv2d_transpose channel mismatch: input has {channels} channels "
            f"(dimension 1) but kernel expects {in_channels}"
        )
    if bias is not None and bias.shape != (out_channels,):
        raise ValueError(
            f"conv2d_transpose bias must have shape ({out_channels},), got {bias.shape}"
        )

    if kernel_height == kernel_width == stride:
        out, rule = _tiled_transpose(x.values, kernel.values)
    else:
        out, rule = _scattered_transpose(x.values, kernel.values, stride)
    if bias is not None:
        out += bias.values[None, :, None, None]

    def with_bias(g: np.ndarray) -> list[np.ndarray]:
        grads = rule(g)
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record(out, inputs, with_bias)


def _tiled_transpose(
    x: np.ndarray, kernel: np.ndarray
) -> tuple[np.ndarray, BackwardRule]:
    # Stride equals the kernel size: the output tiles do not overlap.
    batch, in_channels, height, width = x.shape
    _, out_channels, size, _ = kernel.shape
    x_rows = x.transpose(0, 2, 3, 1).reshape(-1, in_channels)
    weights = kernel.reshape(in_channels, -1)
    tiles = (x_rows @ weights).reshape(batch, height, width, out_channels, size, size)
    out = np.ascontiguousarray(tiles.transpose(0, 3, 1, 4, 2, 5)).reshape(
        batch, out_channels, height * size, width * size
    )

    def rule(g: np.ndarray) -> list[np.ndarray]:
        g_rows = (
            g.reshape(batch, out_channels, height, size, width, size)
            .transpose(0, 2, 4, 1, 3, 5)
            .reshape(-1, out_channels * size * size)
        )
        grad_input = (g_rows @ weights.T).reshape(batch, height, width, in_channels)
        grad_kernel = (x_rows.T @ g_rows).reshape(kernel.shape)
        return [np.ascontiguousarray(grad_input.transpose(0, 3, 1, 2)), grad_kernel]

    return out, rule


def _scattered_transpose(
    x: np.ndarray, kernel: np.ndarray, stride: int
) -> tuple[np.ndarray, BackwardRule]:
    batch, _, height, width = x.shape
    _, out_channels, kernel_height, kernel_width = kernel.shape
    span_h = stride * (height - 1) + 1
    span_w = stride * (width - 1) + 1
    out = np.zeros(
        (batch, out_channels, span_h - 1 + kernel_height, span_w - 1 + kernel_width)
    )
    for i in range(kernel_height):
        for j in range(kernel_width):
            scattered = np.tensordot(x, kernel[:, :, i, j], axes=([1], [0]))
            out[:, :, i : i + span_h : stride, j : j + span_w : stride] += (
                scattered.transpose(0, 3, 1, 2)
            )

    def rule(g: np.ndarray) -> list[np.ndarray]:
        grad_input = np.zeros_like(x)
        grad_kernel = np.zeros_like(kernel)
        for i in range(kernel_height):
            for j in range(kernel_width):
                strided = g[:, :, i : i + span_h : stride, j : j + span_w : stride]
                grad_input += np.tensordot(
                    strided, kernel[:, :, i, j], axes=([1], [1])
                ).transpose(0, 3, 1, 2)
                grad_kernel[:, :, i, j] = np.tensordot(
                    x, strided, axes=([0, 2, 3], [0, 2, 3])
                )
        return [grad_input, grad_kernel]

    return out, rule


def max_pool2(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """2x2 stride-2 max pooling with floor semantics.

    Returns the pooled tensor and the argmax index (0..3, row-major inside each
    window, first maximum wins).
    """
    if x.ndim != 4:
        raise ValueError(f"max_pool2 expects a 4-D input, got {x.shape}")
    batch, channels, height, width = x.shape
    if height < 2 or width < 2:
        raise ValueError(f"max_pool2 needs height and width >= 2, got {height}x{width}")
    out_h, out_w = height // 2, width // 2

    windows = (
        x.values[:, :, : 2 * out_h, : 2 * out_w]
        .reshape(batch, channels, out_h, 2, out_w, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(batch, channels, out_h, out_w, 4)
    )
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        routed = np.zeros((batch, channels, out_h, out_w, 4))
        np.put_along_axis(routed, argmax[..., None], g[..., None], axis=-1)
        grad = np.zeros_like(x.values)
        grad[:, :, : 2 * out_h, : 2 * out_w] = (
            routed.reshape(batch, channels, out_h, out_w, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(batch, channels, 2 * out_h, 2 * out_w)
        )
        return (grad,)

    return record(out, (x,), rule), argmax


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` then ``b`` along the channel axis."""
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError(
            f"concat_channels expects 4-D tensors, got {a.shape} and {b.shape}"
        )
    for axis, label in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[axis] != b.shape[axis]:
            raise ValueError(
                f"concat_channels {label} mismatch (dimension {axis}): "
                f"{a.shape[axis]} vs {b.shape[axis]}"
            )
    split = a.shape[1]
    return record(
        np.concatenate([a.values, b.values], axis=1),
        (a, b),
        lambda g: (g[:, :split], g[:, split:]),
    )


def pad_to(x: Tensor, height: int, width: int) -> Tensor:
    """Zero-pad bottom/right so the feature map reaches ``height`` x ``width``."""
    current_h, current_w = x.shape[2], x.shape[3]
    if current_h > height or current_w > width:
        raise ValueError(
            f"pad_to cannot shrink {current_h}x{current_w} to {height}x{width}"
        )
    padded = np.pad(
        x.values, ((0, 0), (0, 0), (0, height - current_h), (0, width - current_w))
    )
    return record(padded, (x,), lambda g: (g[:, :, :current_h, :current_w],))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=axis, keepdims=True)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        return (probs * (g - (g * probs).sum(axis=axis, keepdims=True)),)

    return record(probs, (x,), rule)


def sum_of_squares(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of squared entries over several tensors (the L2 penalty)."""
    if not tensors:
        return Tensor(0.0)
    total = sum(float(np.sum(item.values * item.values)) for item in tensors)
    return record(
        np.array(total),
        tuple(tensors),
        lambda g: tuple(2.0 * g * item.values for item in tensors),
    )


def grad_check(
    f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-5
) -> float:
    """Maximum relative error between the tape gradient and central differences.

    The error per element is |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    base = np.array(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
    point = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(point)
    if not np.all(np.isfinite(out.values)):
        raise ValueError("grad_check: f(x) is not finite")
    gradients = backward(out, tape)
    analytic = gradients.get(point, np.zeros_like(base))

    numeric = np.empty_like(base)
    for index in np.ndindex(base.shape):
        plus = base.copy()
        plus[index] += h
        minus = base.copy()
        minus[index] -= h
        upper = float(f(Tensor(plus)).values)
        lower = float(f(Tensor(minus)).values)
        numeric[index] = (upper - lower) / (2.0 * h)

    if base.size == 0:
        return 0.0
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale))


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op} needs identical shapes, got {a.shape} and {b.shape}")
