"""sunet.pgm

Binary 8-bit PGM (P5) reader and writer. Files are written with maxval 255
and masks as {0, 255}; reading honours any maxval up to 255.
Spacing is not stored in the file; it travels in the dataset manifest.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from sunet.imageops import BinaryMask, GrayImage, Spacing

_WHITESPACE = b" \t\r\n"


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` header tokens, skipping comments; return them and the offset."""
    tokens: list[bytes] = []
    position = 0
    while len(tokens) < count:
        if position >= len(data):
            raise ValueError("PGM header is truncated")
        byte = data[position : position + 1]
        if byte in (b" ", b"\t", b"\r", b"\n"):
            position += 1
        elif byte == b"#":
            end = data.find(b"\n", position)
            position = len(data) if end < 0 else end + 1
        else:
            start = position
            while position < len(data) and data[position] not in _WHITESPACE:
                position += 1
            tokens.append(data[start:position])
    # Exactly one whitespace byte separates the header from the raster.
    return tokens, position + 1


def _read_raster(path: Path) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    tokens, offset = _header_tokens(data, 4)
    magic, width, height, max_value = tokens
    if magic != b"P5":
        raise ValueError(f"{path}: unsupported PGM magic {magic!r}, expected P5")
    width, height, max_value = int(width), int(height), int(max_value)
    if not 0 < max_value <= 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported (maxval {max_value})")
    raster = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=offset)
    if raster.max(initial=0) > max_value:
        raise ValueError(f"{path}: raster value above maxval {max_value}")
    return raster.reshape(height, width).copy(), max_value


def read_pgm(path: Path) -> np.ndarray:
    """Return the raster of a P5 file as a (height, width) uint8 array."""
    return _read_raster(path)[0]


def write_pgm(path: Path, values: np.ndarray) -> None:
    """Write a 2-D uint8 raster as P5 with maxval 255."""
    raster = np.asarray(values)
    if raster.ndim != 2 or raster.dtype != np.uint8:
        raise ValueError(f"write_pgm needs a 2-D uint8 array, got {raster.dtype} {raster.shape}")
    height, width = raster.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + raster.tobytes())


def read_image(path: Path, spacing: Spacing) -> GrayImage:
    """Intensities scaled to [0, 1] by the header maxval."""
    raster, max_value = _read_raster(path)
    return GrayImage(raster / float(max_value), spacing)


def read_mask(path: Path, spacing: Spacing) -> BinaryMask:
    """Foreground is every pixel above half the header maxval."""
    raster, max_value = _read_raster(path)
    return BinaryMask(raster.astype(np.int32) * 2 > max_value, spacing)


def write_image(path: Path, image: GrayImage) -> None:
    """Quantize [0, 1] intensities to 8 bits and write them."""
    write_pgm(path, np.round(np.clip(image.values, 0.0, 1.0) * 255.0).astype(np.uint8))


def write_mask(path: Path, mask: BinaryMask) -> None:
    """Write a mask as 0 / 255."""
    write_pgm(path, np.where(mask.values, 255, 0).astype(np.uint8))
