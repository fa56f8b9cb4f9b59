"""Image IO: binary PGM/PPM natively, PNG through Pillow when installed.

Images are ``(C, H, W)`` float64 arrays in ``[0, 1]``; C is 1 (gray) or 3 (RGB).
8-bit data round-trips exactly through PPM/PGM.
"""

from __future__ import annotations

import os
import re

import numpy as np

from .errors import FormatError, ShapeError
from .render import FeatureGrid

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_pnm(blob: bytes, path) -> np.ndarray:
    magic = blob[:2]
    if magic not in (b"P5", b"P6", b"P2", b"P3"):
        raise FormatError(f"{path}: not a PGM/PPM file (magic {magic!r})")
    pos, values = 2, []
    for _ in range(3):
        m = _TOKEN.match(blob, pos)
        if not m:
            raise FormatError(f"{path}: truncated header")
        try:
            values.append(int(m.group(1)))
        except ValueError as exc:
            raise FormatError(f"{path}: bad header field {m.group(1)!r}") from exc
        pos = m.end()
    w, h, maxval = values
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad header {w}x{h} maxval {maxval}")
    channels = 3 if magic in (b"P6", b"P3") else 1
    count = w * h * channels
    if magic in (b"P5", b"P6"):
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        start = pos + 1  # single whitespace byte after maxval
        data = np.frombuffer(blob, dtype=dtype, count=count, offset=start) if len(blob) >= start + count * dtype.itemsize else None
        if data is None:
            raise FormatError(f"{path}: truncated pixel data")
    else:
        data = np.array(blob[pos:].split()[:count], dtype=np.int64)
        if data.size != count:
            raise FormatError(f"{path}: truncated pixel data")
    if data.max(initial=0) > maxval:
        raise FormatError(f"{path}: sample exceeds maxval")
    img = data.reshape(h, w, channels).astype(np.float64) / maxval
    return np.moveaxis(img, 2, 0)


def load_image(path) -> FeatureGrid:
    """Read PGM/PPM (P2, P3, P5, P6) or, with Pillow, any format it supports."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:1] == b"P" and blob[1:2] in b"2356":
        return FeatureGrid(_parse_pnm(blob, path))
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise FormatError(f"{path}: only PGM/PPM are supported without Pillow") from exc
    try:
        with Image.open(path) as im:
            mode = "L" if im.mode in ("1", "L", "I", "I;16", "F") else "RGB"
            arr = np.asarray(im.convert(mode), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:  # UnidentifiedImageError is an OSError
        raise FormatError(f"{path}: unsupported or malformed image ({exc})") from exc
    return FeatureGrid(arr[None] if arr.ndim == 2 else np.moveaxis(arr, 2, 0))


def to_uint8(img) -> np.ndarray:
    """``(H, W)`` or ``(H, W, 3)`` uint8, rounding half to even after clipping to [0, 1]."""
    x = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise ShapeError(f"can only save 1- or 3-channel images, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise FormatError("cannot save non-finite pixel values")
    q = np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)
    return q[0] if q.shape[0] == 1 else np.moveaxis(q, 0, 2)


def save_image(grid, path) -> None:
    """Write by extension: ``.pgm``/``.ppm`` natively (8-bit), others via Pillow."""
    q = to_uint8(grid)
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".ppm", ".pgm", ".pnm"):
        if ext == ".pgm" and q.ndim == 3:
            raise ShapeError("PGM holds a single channel")
        if ext == ".ppm" and q.ndim == 2:
            q = np.repeat(q[:, :, None], 3, axis=2)
        magic = b"P5" if q.ndim == 2 else b"P6"
        with open(path, "wb") as fh:
            fh.write(b"%s\n%d %d\n255\n" % (magic, q.shape[1], q.shape[0]))
            fh.write(q.tobytes())
        return
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise FormatError(f"{path}: saving {ext or 'this format'} requires Pillow") from exc
    Image.fromarray(q).save(path)
