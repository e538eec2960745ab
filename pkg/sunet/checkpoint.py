"""sunet.checkpoint

Checkpoint files: an 8-byte little-endian header length, a UTF-8 JSON header
(config, buffer names and shapes, step count), then float64 buffers in order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from sunet.models import NetworkConfig
from sunet.network import Network
from sunet.snn import RunningStats
from sunet.tensor import Tensor

_LENGTH = struct.Struct("<Q")
_DTYPE = np.dtype("<f8")


def save_checkpoint(path: Path, net: Network, step: int) -> None:
    """Write parameters and batch-norm running stats of ``net``."""
    buffers: list[tuple[str, np.ndarray]] = [
        (name, parameter.values) for name, parameter in net.parameters.items()
    ]
    for name, stats in net.running_stats.items():
        buffers.append((f"running:{name}.mean", stats.mean))
        buffers.append((f"running:{name}.var", stats.var))

    header = json.dumps(
        {
            "config": net.config.model_dump(),
            "step": step,
            "buffers": [
                {"name": name, "shape": list(values.shape)} for name, values in buffers
            ],
        },
        sort_keys=True,
    ).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(_LENGTH.pack(len(header)))
        handle.write(header)
        for _, values in buffers:
            handle.write(np.ascontiguousarray(values, dtype=_DTYPE).tobytes())


def load_checkpoint(path: Path) -> tuple[Network, int]:
    """Rebuild the network stored at ``path`` and return it with its step."""
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    (length,) = _LENGTH.unpack_from(data, 0)
    header = json.loads(data[_LENGTH.size : _LENGTH.size + length].decode("utf-8"))
    offset = _LENGTH.size + length

    parameters: dict[str, Tensor] = {}
    running: dict[str, dict[str, np.ndarray]] = {}
    for buffer in header["buffers"]:
        shape = tuple(buffer["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(data, dtype=_DTYPE, count=count, offset=offset)
        values = values.reshape(shape).astype(np.float64)
        offset += count * _DTYPE.itemsize

        name = buffer["name"]
        if name.startswith("running:"):
            layer, _, field_name = name.removeprefix("running:").rpartition(".")
            running.setdefault(layer, {})[field_name] = values
        else:
            parameters[name] = Tensor(values, requires_grad=True, name=name)

    if offset != len(data):
        raise ValueError(f"checkpoint {path} has {len(data) - offset} trailing bytes")

    config = NetworkConfig.model_validate(header["config"])
    running_stats = {
        layer: RunningStats(mean=fields["mean"], var=fields["var"])
        for layer, fields in running.items()
    }
    return Network(config, parameters, running_stats), int(header["step"])
