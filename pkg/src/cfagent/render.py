"""Deterministic 8-bit PNG rendering for the console.

Grayscale maps [0,1] linearly to [0,255]; difference maps use a fixed
256-entry heat lookup (black -> red -> yellow -> white). The encoder is
self-contained (zlib at a pinned level, no ancillary chunks, no timestamps)
so identical pixels always yield identical bytes.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

_PNG_SIG = b"\x89PNG\r\n\x1a\n"
_ZLIB_LEVEL = 6


def heat_lut() -> np.ndarray:
    """(256, 3) uint8 lookup: integer ramp through red, then green, then blue."""
    i = np.arange(256, dtype=np.int32)
    r = np.clip(3 * i, 0, 255)
    g = np.clip(3 * (i - 85), 0, 255)
    b = np.clip(3 * (i - 170), 0, 255)
    return np.stack([r, g, b], axis=1).astype(np.uint8)


_HEAT = heat_lut()


def quantize(img01: np.ndarray) -> np.ndarray:
    """[0,1] floats -> uint8 via round-half-even of 255*v."""
    arr = np.asarray(img01, dtype=np.float64)
    return np.rint(255.0 * arr).astype(np.uint8)


def _chunk(kind: bytes, data: bytes) -> bytes:
    return (
        struct.pack(">I", len(data))
        + kind
        + data
        + struct.pack(">I", zlib.crc32(kind + data) & 0xFFFFFFFF)
    )


def _encode(raw_rows: bytes, width: int, height: int, color_type: int) -> bytes:
    ihdr = struct.pack(">IIBBBBB", width, height, 8, color_type, 0, 0, 0)
    idat = zlib.compress(raw_rows, _ZLIB_LEVEL)
    return _PNG_SIG + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", idat) + _chunk(b"IEND", b"")


def render_png(img01: np.ndarray, colormap: str = "gray") -> bytes:
    """2-D [0,1] image -> PNG bytes in the requested colormap."""
    levels = quantize(img01)
    height, width = levels.shape
    if colormap == "gray":
        rows = levels
        color_type = 0
    elif colormap == "heat":
        rows = _HEAT[levels]  # (h, w, 3)
        color_type = 2
    else:
        raise ValueError(f"unknown colormap {colormap!r}")
    body = bytearray()
    flat = rows.reshape(height, -1)
    for y in range(height):
        body.append(0)  # filter type None
        body.extend(flat[y].tobytes())
    return _encode(bytes(body), width, height, color_type)
