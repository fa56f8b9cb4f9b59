"""Image quality metrics."""

import math

import numpy as np

from .errors import ShapeError

# ITU-R BT.601 luma on [0, 1] inputs, as used by most SR evaluation scripts.
_LUMA = np.array([65.481, 128.553, 24.966]) / 255.0
_LUMA_OFFSET = 16.0 / 255.0


def _array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def to_luma(img) -> np.ndarray:
    arr = _array(img)
    if arr.ndim == 2:
        return arr
    if arr.shape[0] == 1:
        return arr[0]
    if arr.shape[0] != 3:
        raise ShapeError(f"luma needs 1 or 3 channels, got {arr.shape[0]}")
    return _LUMA_OFFSET + np.tensordot(_LUMA, arr, axes=1)


def mse(a, b) -> float:
    x, y = _array(a), _array(b)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    return float(np.mean((x - y) ** 2))


def psnr(a, b, max_val: float = 1.0, luma: bool = False) -> float:
    """Peak signal-to-noise ratio in dB over the whole image (no border crop).

    By default the MSE is averaged over all RGB entries; ``luma=True`` compares
    BT.601 luma instead.  Identical inputs give ``math.inf``.
    """
    x, y = _array(a), _array(b)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    if luma:
        x, y = to_luma(x), to_luma(y)
    err = float(np.mean((x - y) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / err)
