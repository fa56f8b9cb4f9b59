"""Rasterize Gaussian fields onto pixel grids of arbitrary resolution.

Three support policies share one tiled kernel:

``dense``
    every Gaussian touches every pixel (subject to the exponent floor);
``affine``
    a Gaussian touches the pixels inside its placed local kernel window,
    ``|p - mu| <= kernel_extent * unit`` per axis (the affine-grid method);
``tiled``
    a Gaussian touches the pixels inside its bounding box of
    ``support_radius_sigmas * max(sqrt(s_xx), sqrt(s_yy))`` local units.

For each output pixel, contributions are summed in ascending Gaussian index,
so the tile size and worker count never change the result.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import _backend
from .errors import DomainError, EmptyFieldError, InvalidParameterError, ShapeError
from .gauss import EXP_FLOOR, GaussianField, Normalization, activate_arrays, grid_centers, prefactor

SUPPORTS = ("tiled", "affine", "dense")


@dataclass(frozen=True)
class RenderConfig:
    out_width: int
    out_height: int
    kernel_grid: int = 21
    kernel_extent: float = 5.0
    support_radius_sigmas: float = 4.0
    tile_size: int = 16
    normalization: Normalization = Normalization.PAPER_LITERAL
    clamp_output: bool = False
    # normalized rectangle (x0, y0, x1, y1) covered by the output grid
    canvas: tuple = (0.0, 0.0, 1.0, 1.0)
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "normalization", Normalization.parse(self.normalization))
        object.__setattr__(self, "canvas", tuple(float(c) for c in self.canvas))
        if int(self.out_width) != self.out_width or int(self.out_height) != self.out_height:
            raise InvalidParameterError("output dimensions must be integers")
        if self.out_width < 1 or self.out_height < 1:
            raise DomainError(f"degenerate output size {self.out_height}x{self.out_width}")
        if self.kernel_grid < 3 or self.kernel_grid % 2 == 0:
            raise InvalidParameterError("kernel_grid must be an odd integer >= 3")
        if not self.kernel_extent > 0:
            raise InvalidParameterError("kernel_extent must be positive")
        if not self.support_radius_sigmas >= 1:
            raise InvalidParameterError("support_radius_sigmas must be >= 1")
        if self.tile_size < 1:
            raise InvalidParameterError("tile_size must be >= 1")
        if self.threads < 1:
            raise InvalidParameterError("threads must be >= 1")
        x0, y0, x1, y1 = self.canvas
        if not (x1 > x0 and y1 > y0):
            raise InvalidParameterError(f"empty canvas {self.canvas}")

    def resized(self, out_height: int, out_width: int) -> "RenderConfig":
        return replace(self, out_height=int(out_height), out_width=int(out_width))


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """``channels x height x width`` array of float64, channel-major then row-major."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ShapeError(f"FeatureGrid needs a non-empty (C, H, W) array, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidParameterError("FeatureGrid entries must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    @classmethod
    def from_flat(cls, channels: int, height: int, width: int, data) -> "FeatureGrid":
        arr = np.asarray(data, dtype=np.float64)
        if arr.size != channels * height * width:
            raise ShapeError(f"expected {channels * height * width} values, got {arr.size}")
        return cls(arr.reshape(channels, height, width))


class Prepared(NamedTuple):
    """Activated per-Gaussian arrays in the layout the kernels expect."""

    mu: np.ndarray
    icov: np.ndarray
    z: np.ndarray
    color: np.ndarray
    unit: np.ndarray
    s_xx: np.ndarray
    s_yy: np.ndarray
    s_xy: np.ndarray
    opacity: np.ndarray


def prepare(field: GaussianField, normalization) -> Prepared:
    if len(field) == 0:
        raise EmptyFieldError("cannot render an empty field")
    field.check_domain()
    s_xx, s_yy, s_xy, opacity = activate_arrays(field.sigma_x_raw, field.sigma_y_raw, field.rho_raw, field.xi_raw)
    det = s_xx * s_yy - s_xy * s_xy
    icov = np.ascontiguousarray(np.stack([s_yy / det, -s_xy / det, s_xx / det], axis=1))
    z = np.ascontiguousarray(np.broadcast_to(prefactor(det, normalization), det.shape), dtype=np.float64)
    color = np.ascontiguousarray(opacity[:, None] * field.v)
    return Prepared(
        mu=np.ascontiguousarray(field.mu),
        icov=icov,
        z=z,
        color=color,
        unit=np.array(field.unit, dtype=np.float64),
        s_xx=s_xx,
        s_yy=s_yy,
        s_xy=s_xy,
        opacity=opacity,
    )


def support_half_widths(prep: Prepared, cfg: RenderConfig, support: str) -> tuple[np.ndarray, np.ndarray]:
    """Half-widths of each Gaussian's support box in normalized coordinates."""
    n = prep.mu.shape[0]
    if support == "dense":
        return np.full(n, np.inf), np.full(n, np.inf)
    if support == "affine":
        return np.full(n, cfg.kernel_extent * prep.unit[0]), np.full(n, cfg.kernel_extent * prep.unit[1])
    if support == "tiled":
        radius = cfg.support_radius_sigmas * np.sqrt(np.maximum(prep.s_xx, prep.s_yy))
        return radius * prep.unit[0], radius * prep.unit[1]
    raise InvalidParameterError(f"unknown support {support!r}; expected one of {SUPPORTS}")


def support_boxes(prep: Prepared, xs: np.ndarray, ys: np.ndarray, cfg: RenderConfig, support: str) -> np.ndarray:
    """Half-open pixel index ranges ``[x0, x1, y0, y1]`` of pixels with ``|p - mu| <= half``."""
    hx, hy = support_half_widths(prep, cfg, support)
    mx, my = prep.mu[:, 0], prep.mu[:, 1]
    box = np.empty((len(mx), 4), dtype=np.intp)
    box[:, 0] = np.searchsorted(xs, mx - hx, side="left")
    box[:, 1] = np.searchsorted(xs, mx + hx, side="right")
    box[:, 2] = np.searchsorted(ys, my - hy, side="left")
    box[:, 3] = np.searchsorted(ys, my + hy, side="right")
    return box


def _tile_lists(box: np.ndarray, width: int, height: int, ts: int):
    """Gaussian indices (ascending) for every tile that some support box touches."""
    ntx = -(-width // ts)
    nonempty = np.flatnonzero((box[:, 1] > box[:, 0]) & (box[:, 3] > box[:, 2]))
    b = box[nonempty]
    tx0, tx1 = b[:, 0] // ts, (b[:, 1] - 1) // ts + 1
    ty0, ty1 = b[:, 2] // ts, (b[:, 3] - 1) // ts + 1
    nx, ny = tx1 - tx0, ty1 - ty0
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return []
    owner = np.repeat(np.arange(len(b)), counts)
    offset = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    tile_x = tx0[owner] + offset % nx[owner]
    tile_y = ty0[owner] + offset // nx[owner]
    tile_id = tile_y * ntx + tile_x
    gid = nonempty[owner]
    order = np.lexsort((gid, tile_id))
    tile_id, gid = tile_id[order], gid[order]
    cuts = np.flatnonzero(np.diff(tile_id)) + 1
    tiles = []
    for ids, gs in zip(np.split(tile_id, cuts), np.split(gid, cuts)):
        t = int(ids[0])
        tx, ty = t % ntx, t // ntx
        tiles.append((tx * ts, min((tx + 1) * ts, width), ty * ts, min((ty + 1) * ts, height), np.ascontiguousarray(gs, dtype=np.intp)))
    return tiles


def rasterize(field: GaussianField, cfg: RenderConfig, support: str = "tiled") -> np.ndarray:
    """Unclamped ``(K, H, W)`` rendering under the given support policy."""
    prep = prepare(field, cfg.normalization)
    xs, ys = grid_centers(cfg.out_height, cfg.out_width, cfg.canvas)
    box = support_boxes(prep, xs, ys, cfg, support)
    return _rasterize_prepared(prep, xs, ys, box, cfg)


def _rasterize_prepared(prep: Prepared, xs, ys, box, cfg: RenderConfig) -> np.ndarray:
    out = np.zeros((prep.color.shape[1], len(ys), len(xs)))
    kern = _backend.kernels()
    tiles = _tile_lists(box, len(xs), len(ys), cfg.tile_size)

    def run(tile):
        x0, x1, y0, y1, gidx = tile
        kern.forward_tile(prep.mu, prep.icov, prep.z, prep.color, prep.unit, xs, ys, box, gidx, x0, x1, y0, y1, out)

    if cfg.threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            list(pool.map(run, tiles))
    else:
        for tile in tiles:
            run(tile)
    return out


def _finish(values: np.ndarray, cfg: RenderConfig) -> FeatureGrid:
    if cfg.clamp_output:
        values = np.clip(values, 0.0, 1.0)
    return FeatureGrid(values)


def render_tiled(field: GaussianField, cfg: RenderConfig) -> FeatureGrid:
    return _finish(rasterize(field, cfg, "tiled"), cfg)


def render_dense(field: GaussianField, cfg: RenderConfig) -> FeatureGrid:
    return _finish(rasterize(field, cfg, "dense"), cfg)


def affine_placements(field: GaussianField, cfg: RenderConfig) -> np.ndarray:
    """Per-Gaussian ``2 x 3`` matrices mapping local kernel coordinates to the canvas.

    Canvas coordinates follow the ``[-1, 1]`` convention of affine sampling
    grids: ``-1`` is the left/top canvas edge and ``+1`` the right/bottom edge.
    A local point ``u`` (in kernel units, the window spans
    ``[-kernel_extent, kernel_extent]``) lands at ``theta @ (u_x, u_y, 1)``.
    """
    if len(field) == 0:
        raise EmptyFieldError("cannot place an empty field")
    x0, y0, x1, y1 = cfg.canvas
    sx, sy = 2.0 / (x1 - x0), 2.0 / (y1 - y0)
    theta = np.zeros((len(field), 2, 3))
    theta[:, 0, 0] = sx * field.unit[0]
    theta[:, 1, 1] = sy * field.unit[1]
    theta[:, 0, 2] = sx * (field.mu[:, 0] - x0) - 1.0
    theta[:, 1, 2] = sy * (field.mu[:, 1] - y0) - 1.0
    return theta


def _check_centers(field: GaussianField) -> None:
    if len(field) == 0:
        raise EmptyFieldError("cannot render an empty field")
    field.check_domain()


def render_affine(field: GaussianField, cfg: RenderConfig, method: str = "analytic") -> FeatureGrid:
    """Render by placing each Gaussian's local kernel window on the canvas.

    ``method="analytic"`` evaluates the kernel exactly at the local coordinates
    of each covered pixel center.  ``method="warp"`` is the precompute-then-warp
    variant: the exponential part is tabulated on a ``kernel_grid``-point grid
    over the window, scaled to peak 1 and bilinearly resampled through the
    placement; the prefactor is applied afterwards (for the unnormalized
    convention this is the classic tabulated-kernel splatting routine).
    """
    _check_centers(field)
    if method == "analytic":
        return _finish(rasterize(field, cfg, "affine"), cfg)
    if method != "warp":
        raise InvalidParameterError(f"unknown affine method {method!r}")
    return _finish(_render_warp(field, cfg), cfg)


def _render_warp(field: GaussianField, cfg: RenderConfig) -> np.ndarray:
    prep = prepare(field, cfg.normalization)
    theta = affine_placements(field, cfg)
    n, g, ext = len(field), cfg.kernel_grid, cfg.kernel_extent
    axis = np.linspace(-ext, ext, g)
    gx, gy = np.meshgrid(axis, axis)
    xs, ys = grid_centers(cfg.out_height, cfg.out_width, cfg.canvas)
    x0, y0, x1, y1 = cfg.canvas
    cx = 2.0 * (xs - x0) / (x1 - x0) - 1.0
    cy = 2.0 * (ys - y0) / (y1 - y0) - 1.0
    out = np.zeros((prep.color.shape[1], len(ys), len(xs)))
    spacing = 2.0 * ext / (g - 1)
    for i in range(n):
        a, b, c = prep.icov[i]
        expo = -0.5 * (a * gx * gx + 2.0 * b * gx * gy + c * gy * gy)
        table = np.where(expo < EXP_FLOOR, 0.0, np.exp(expo))
        table /= table.max()
        # invert the placement: local = (canvas - t) / scale
        ux = (cx - theta[i, 0, 2]) / theta[i, 0, 0]
        uy = (cy - theta[i, 1, 2]) / theta[i, 1, 1]
        fx = (ux + ext) / spacing
        fy = (uy + ext) / spacing
        inside_x = (fx >= 0) & (fx <= g - 1)
        inside_y = (fy >= 0) & (fy <= g - 1)
        if not inside_x.any() or not inside_y.any():
            continue
        ix0 = np.clip(np.floor(fx).astype(int), 0, g - 2)
        iy0 = np.clip(np.floor(fy).astype(int), 0, g - 2)
        wx = fx - ix0
        wy = (fy - iy0)[:, None]
        t00 = table[iy0[:, None], ix0[None, :]]
        t01 = table[iy0[:, None], ix0[None, :] + 1]
        t10 = table[iy0[:, None] + 1, ix0[None, :]]
        t11 = table[iy0[:, None] + 1, ix0[None, :] + 1]
        k = (1 - wy) * ((1 - wx) * t00 + wx * t01) + wy * ((1 - wx) * t10 + wx * t11)
        k *= inside_y[:, None] & inside_x[None, :]
        out += prep.z[i] * k[None] * prep.color[i][:, None, None]
    return out


def scaled_size(base: int, scale: float) -> int:
    """``round(base * scale)`` with halves rounded up."""
    return int(math.floor(base * scale + 0.5))


def render_at_scale(field: GaussianField, scale: float, base_h: int, base_w: int, cfg: RenderConfig, support: str = "tiled") -> FeatureGrid:
    if not (scale > 0 and math.isfinite(scale)):
        raise DomainError(f"scale must be positive and finite, got {scale}")
    h, w = scaled_size(base_h, scale), scaled_size(base_w, scale)
    if h < 1 or w < 1:
        raise DomainError(f"scale {scale} on {base_h}x{base_w} gives degenerate output {h}x{w}")
    return _finish(rasterize(field, cfg.resized(h, w), support), cfg)


def render_points(field: GaussianField, points, cfg: RenderConfig, support: str = "tiled") -> np.ndarray:
    """Field values at arbitrary query points ``(P, 2)``; returns ``(P, K)``.

    Uses the same support policy as the grid renderers, so values agree with
    :func:`render_tiled` wherever a query point coincides with a pixel center.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise InvalidParameterError("query points must be finite")
    prep = prepare(field, cfg.normalization)
    hx, hy = support_half_widths(prep, cfg, support)
    out = np.zeros((len(pts), prep.color.shape[1]))
    for i in range(len(field)):
        mx, my = prep.mu[i]
        inside = (pts[:, 0] >= mx - hx[i]) & (pts[:, 0] <= mx + hx[i])
        inside &= (pts[:, 1] >= my - hy[i]) & (pts[:, 1] <= my + hy[i])
        dx = (pts[:, 0] - mx) / prep.unit[0]
        dy = (pts[:, 1] - my) / prep.unit[1]
        a, b, c = prep.icov[i]
        e = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
        inside &= e >= EXP_FLOOR
        f = np.where(inside, prep.z[i] * np.exp(np.where(inside, e, 0.0)), 0.0)
        out += f[:, None] * prep.color[i][None, :]
    return out
