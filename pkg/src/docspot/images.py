"""Grayscale image plumbing: binary PGM I/O, cropping, bilinear resampling.

Images are 2-D numpy arrays of uint8 intensities (0 = black ink,
255 = white paper), indexed [row, column].
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError
from .geometry import BBox


def as_gray(img) -> np.ndarray:
    """Validate and return a 2-D uint8 intensity array."""
    a = np.asarray(img)
    if a.ndim != 2 or a.size == 0:
        raise InputError(f"expected a non-empty 2-D intensity array, got shape {a.shape}")
    if a.dtype != np.uint8:
        if not np.issubdtype(a.dtype, np.integer):
            raise InputError(f"expected integer intensities, got dtype {a.dtype}")
        if a.min() < 0 or a.max() > 255:
            raise InputError("intensities must lie in [0, 255]")
        a = a.astype(np.uint8)
    return a


def _read_header_token(data: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comments, then read one token
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            while pos < n and data[pos : pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("truncated PGM header")
    return data[start:pos], pos


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PGM ("P5") file with maxval 255.

    Any other magic or maxval is rejected; the pixel payload must be
    exactly width*height bytes.
    """
    data = Path(path).read_bytes()
    magic, pos = _read_header_token(data, 0)
    if magic != b"P5":
        raise FormatError(f"not a binary PGM (magic {magic!r}, expected b'P5')")
    fields = []
    for _ in range(3):
        tok, pos = _read_header_token(data, pos)
        if not tok.isdigit():
            raise FormatError(f"bad PGM header token {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval} (only 255 is accepted)")
    if width < 1 or height < 1:
        raise FormatError(f"bad PGM dimensions {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    payload = data[pos : pos + width * height]
    if len(payload) != width * height:
        raise FormatError("truncated PGM pixel data")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path: str | os.PathLike, img) -> None:
    """Write a binary PGM ("P5", maxval 255). Byte-deterministic."""
    a = as_gray(img)
    h, w = a.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + a.tobytes())


def crop(img, box: BBox) -> np.ndarray:
    """Extract the pixels of ``box`` from ``img``; the box must lie fully
    inside the image."""
    a = as_gray(img)
    h, w = a.shape
    if box.right > w or box.bottom > h:
        raise InputError(f"box {box} exceeds image bounds {w}x{h}")
    return a[box.y : box.bottom, box.x : box.right]


def resize_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    """Resample to (out_h, out_w) with bilinear interpolation.

    Uses the half-pixel-center convention; returns float64 intensities
    in the source value range. Deterministic.
    """
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise InputError(f"expected a non-empty 2-D array, got shape {a.shape}")
    if out_h < 1 or out_w < 1:
        raise InputError("output size must be positive")
    h, w = a.shape
    sy = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    sx = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0)[:, None]
    wx = (sx - x0)[None, :]
    top = a[np.ix_(y0, x0)] * (1.0 - wx) + a[np.ix_(y0, x1)] * wx
    bot = a[np.ix_(y1, x0)] * (1.0 - wx) + a[np.ix_(y1, x1)] * wx
    return top * (1.0 - wy) + bot * wy
