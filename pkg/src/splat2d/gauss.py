"""Gaussian field data model and pointwise math.

Coordinates live in the normalized image plane, ``[0, 1]^2`` for a full
canvas, with x running along columns and y along rows.  A field also carries a
*unit*: the normalized length of one local kernel unit along each axis.
Covariances are expressed in local units, so a field built from a ``W x H``
grid with ``unit = (3/W, 3/H)`` has activated variances in ``(0, 1)``
corresponding to standard deviations between 0 and 3 grid pixels.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, EmptyFieldError, InvalidParameterError, ShapeError

EPS_PSD = 1e-4
EXP_FLOOR = -30.0
# Activated scales/opacities are kept this far away from 0 and 1.
SIGMOID_MARGIN = 1e-12
DEFAULT_PIXELS_PER_UNIT = 3.0


class Normalization(str, enum.Enum):
    """Density prefactor convention."""

    PAPER_LITERAL = "paper-literal"  # 1 / (2 pi |S|)
    STANDARD = "standard"  # 1 / (2 pi sqrt|S|)
    UNNORMALIZED = "unnormalized"  # 1

    @property
    def det_power(self) -> float:
        return {"paper-literal": 1.0, "standard": 0.5, "unnormalized": 0.0}[self.value]

    @classmethod
    def parse(cls, value: "Normalization | str") -> "Normalization":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for member in cls:
            if member.value == key:
                return member
        raise InvalidParameterError(f"unknown normalization {value!r}")


def prefactor(det, normalization: Normalization | str):
    """Normalization constant Z for covariance determinant(s) ``det``."""
    norm = Normalization.parse(normalization)
    if norm is Normalization.UNNORMALIZED:
        return np.ones_like(np.asarray(det, dtype=np.float64))[()]
    return 1.0 / (2.0 * math.pi * np.asarray(det, dtype=np.float64) ** norm.det_power)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, SIGMOID_MARGIN, 1.0 - SIGMOID_MARGIN)[()]


def _sigmoid_scalar(x: float) -> float:
    if x >= 0:
        s = 1.0 / (1.0 + math.exp(-x))
    else:
        e = math.exp(x)
        s = e / (1.0 + e)
    return min(max(s, SIGMOID_MARGIN), 1.0 - SIGMOID_MARGIN)


@dataclass(frozen=True)
class Gaussian2D:
    mu: tuple[float, float]
    sigma_x_raw: float
    sigma_y_raw: float
    rho_raw: float
    xi_raw: float
    v: tuple[float, ...]


@dataclass(frozen=True)
class Covariance2:
    s_xx: float
    s_yy: float
    s_xy: float

    def __post_init__(self):
        if not (self.s_xx > 0 and self.s_yy > 0 and self.det > 0):
            raise InvalidParameterError(f"covariance is not positive definite: {self}")

    @property
    def det(self) -> float:
        return self.s_xx * self.s_yy - self.s_xy * self.s_xy

    def inverse(self) -> tuple[float, float, float]:
        """Entries ``(xx, yy, xy)`` of the inverse matrix."""
        d = self.det
        return self.s_yy / d, self.s_xx / d, -self.s_xy / d

    def matrix(self) -> np.ndarray:
        return np.array([[self.s_xx, self.s_xy], [self.s_xy, self.s_yy]])


def activate(g: Gaussian2D, eps_psd: float = EPS_PSD) -> tuple[Covariance2, float]:
    """Map raw parameters to a covariance and an opacity."""
    raw = (g.sigma_x_raw, g.sigma_y_raw, g.rho_raw, g.xi_raw)
    if not all(math.isfinite(float(r)) for r in raw):
        raise InvalidParameterError(f"non-finite raw parameter in {raw}")
    s_xx = _sigmoid_scalar(float(g.sigma_x_raw))
    s_yy = _sigmoid_scalar(float(g.sigma_y_raw))
    s_xy = math.tanh(float(g.rho_raw)) * math.sqrt(s_xx * s_yy) * (1.0 - eps_psd)
    return Covariance2(s_xx, s_yy, s_xy), _sigmoid_scalar(float(g.xi_raw))


def activate_arrays(sigma_x_raw, sigma_y_raw, rho_raw, xi_raw, eps_psd: float = EPS_PSD):
    """Vectorized :func:`activate`; returns ``(s_xx, s_yy, s_xy, opacity)`` arrays."""
    arrays = [np.asarray(a, dtype=np.float64) for a in (sigma_x_raw, sigma_y_raw, rho_raw, xi_raw)]
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise InvalidParameterError("non-finite raw Gaussian parameter")
    sx, sy, rho, xi = arrays
    s_xx = sigmoid(sx)
    s_yy = sigmoid(sy)
    s_xy = np.tanh(rho) * np.sqrt(s_xx * s_yy) * (1.0 - eps_psd)
    return s_xx, s_yy, s_xy, sigmoid(xi)


def check_psd(s_xx, s_yy, s_xy) -> None:
    """Runtime positive-definiteness check (vacuous under the tanh parameterization)."""
    det = np.asarray(s_xx) * np.asarray(s_yy) - np.asarray(s_xy) ** 2
    if not (np.all(np.asarray(s_xx) > 0) and np.all(np.asarray(s_yy) > 0) and np.all(det > 0)):
        raise InvalidParameterError("covariance matrix is not positive definite")


def eval_density(p, mu, cov: Covariance2, normalization: Normalization | str = Normalization.PAPER_LITERAL) -> float:
    px, py = float(p[0]), float(p[1])
    dx, dy = px - float(mu[0]), py - float(mu[1])
    ixx, iyy, ixy = cov.inverse()
    expo = -0.5 * (ixx * dx * dx + 2.0 * ixy * dx * dy + iyy * dy * dy)
    if expo < EXP_FLOOR:
        return 0.0
    return float(prefactor(cov.det, normalization)) * math.exp(expo)


def blend_feature(g: Gaussian2D) -> np.ndarray:
    return _sigmoid_scalar(float(g.xi_raw)) * np.asarray(g.v, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class GaussianField:
    """An ordered collection of Gaussians stored as parallel arrays.

    ``mu`` is ``(N, 2)`` in normalized ``(x, y)``; the four raw parameter arrays
    are ``(N,)``; ``v`` is ``(N, k)``.  ``domain`` is ``(x0, y0, x1, y1)``.
    Arrays are copied and made read-only on construction.
    """

    mu: np.ndarray
    sigma_x_raw: np.ndarray
    sigma_y_raw: np.ndarray
    rho_raw: np.ndarray
    xi_raw: np.ndarray
    v: np.ndarray
    unit: tuple[float, float] = (1.0, 1.0)
    domain: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)

    PARAM_NAMES = ("mu", "sigma_x_raw", "sigma_y_raw", "rho_raw", "xi_raw", "v")

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64).reshape(-1, 2)
        n = mu.shape[0]
        fields = {"mu": mu}
        for name in ("sigma_x_raw", "sigma_y_raw", "rho_raw", "xi_raw"):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            if arr.shape[0] != n:
                raise ShapeError(f"{name} has {arr.shape[0]} entries, expected {n}")
            fields[name] = arr
        v = np.array(self.v, dtype=np.float64)
        if v.ndim == 1:
            v = v.reshape(n, -1) if n else v.reshape(0, max(v.size, 1))
        if v.ndim != 2 or v.shape[0] != n:
            raise ShapeError(f"v must be (N, k) with N={n}, got {v.shape}")
        fields["v"] = v
        for name, arr in fields.items():
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"non-finite values in {name}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        unit = (float(self.unit[0]), float(self.unit[1]))
        if not (unit[0] > 0 and unit[1] > 0 and all(map(math.isfinite, unit))):
            raise InvalidParameterError(f"unit must be positive, got {unit}")
        object.__setattr__(self, "unit", unit)
        dom = tuple(float(d) for d in self.domain)
        if len(dom) != 4 or not (dom[0] <= dom[2] and dom[1] <= dom[3]):
            raise InvalidParameterError(f"bad domain {self.domain}")
        object.__setattr__(self, "domain", dom)
        self.check_domain()

    def check_domain(self) -> None:
        x0, y0, x1, y1 = self.domain
        m = self.mu
        inside = (m[:, 0] >= x0) & (m[:, 0] <= x1) & (m[:, 1] >= y0) & (m[:, 1] <= y1)
        if not np.all(inside):
            bad = int(np.flatnonzero(~inside)[0])
            raise DomainError(f"Gaussian {bad} center {tuple(m[bad])} lies outside domain {self.domain}")

    def __len__(self) -> int:
        return self.mu.shape[0]

    @property
    def channels(self) -> int:
        return self.v.shape[1]

    @property
    def gaussians(self) -> list[Gaussian2D]:
        return [
            Gaussian2D(
                mu=(float(self.mu[i, 0]), float(self.mu[i, 1])),
                sigma_x_raw=float(self.sigma_x_raw[i]),
                sigma_y_raw=float(self.sigma_y_raw[i]),
                rho_raw=float(self.rho_raw[i]),
                xi_raw=float(self.xi_raw[i]),
                v=tuple(float(x) for x in self.v[i]),
            )
            for i in range(len(self))
        ]

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian2D], unit=(1.0, 1.0), domain=(0.0, 0.0, 1.0, 1.0)) -> "GaussianField":
        gs = list(gaussians)
        if not gs:
            raise EmptyFieldError("cannot build a field from zero Gaussians")
        return cls(
            mu=[g.mu for g in gs],
            sigma_x_raw=[g.sigma_x_raw for g in gs],
            sigma_y_raw=[g.sigma_y_raw for g in gs],
            rho_raw=[g.rho_raw for g in gs],
            xi_raw=[g.xi_raw for g in gs],
            v=[g.v for g in gs],
            unit=unit,
            domain=domain,
        )

    def params(self) -> dict[str, np.ndarray]:
        """Mutable copies of the trainable arrays, keyed by :attr:`PARAM_NAMES`."""
        return {name: getattr(self, name).copy() for name in self.PARAM_NAMES}

    def with_params(self, **arrays) -> "GaussianField":
        """New field with some arrays replaced; the domain grows to cover moved centers."""
        values = {name: arrays.get(name, getattr(self, name)) for name in self.PARAM_NAMES}
        mu = np.asarray(values["mu"], dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(mu)):
            raise DomainError("non-finite Gaussian center")
        x0, y0, x1, y1 = self.domain
        if len(mu):
            x0, y0 = min(x0, float(mu[:, 0].min())), min(y0, float(mu[:, 1].min()))
            x1, y1 = max(x1, float(mu[:, 0].max())), max(y1, float(mu[:, 1].max()))
        return GaussianField(unit=self.unit, domain=(x0, y0, x1, y1), **values)

    def translated(self, offset) -> "GaussianField":
        off = np.asarray(offset, dtype=np.float64).reshape(2)
        x0, y0, x1, y1 = self.domain
        return GaussianField(
            mu=self.mu + off,
            sigma_x_raw=self.sigma_x_raw,
            sigma_y_raw=self.sigma_y_raw,
            rho_raw=self.rho_raw,
            xi_raw=self.xi_raw,
            v=self.v,
            unit=self.unit,
            domain=(x0 + off[0], y0 + off[1], x1 + off[0], y1 + off[1]),
        )

    @staticmethod
    def concat(fields: Iterable["GaussianField"]) -> "GaussianField":
        fs = list(fields)
        if not fs:
            raise EmptyFieldError("nothing to concatenate")
        if any(f.unit != fs[0].unit for f in fs):
            raise InvalidParameterError("fields with different units cannot be concatenated")
        doms = np.array([f.domain for f in fs])
        return GaussianField(
            mu=np.concatenate([f.mu for f in fs]),
            sigma_x_raw=np.concatenate([f.sigma_x_raw for f in fs]),
            sigma_y_raw=np.concatenate([f.sigma_y_raw for f in fs]),
            rho_raw=np.concatenate([f.rho_raw for f in fs]),
            xi_raw=np.concatenate([f.xi_raw for f in fs]),
            v=np.concatenate([f.v for f in fs]),
            unit=fs[0].unit,
            domain=(doms[:, 0].min(), doms[:, 1].min(), doms[:, 2].max(), doms[:, 3].max()),
        )


def grid_centers(height: int, width: int, canvas=(0.0, 0.0, 1.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates ``(xs, ys)`` of a ``height x width`` grid over ``canvas``."""
    x0, y0, x1, y1 = canvas
    xs = x0 + (np.arange(width, dtype=np.float64) + 0.5) * ((x1 - x0) / width)
    ys = y0 + (np.arange(height, dtype=np.float64) + 0.5) * ((y1 - y0) / height)
    return xs, ys


def grid_unit(height: int, width: int, pixels_per_unit: float = DEFAULT_PIXELS_PER_UNIT) -> tuple[float, float]:
    return (pixels_per_unit / width, pixels_per_unit / height)


def field_from_grid(
    values: np.ndarray,
    sigma_x_raw=-2.0,
    sigma_y_raw=-2.0,
    rho_raw=0.0,
    xi_raw=3.0,
    pixels_per_unit: float = DEFAULT_PIXELS_PER_UNIT,
) -> GaussianField:
    """One Gaussian per pixel of a ``(k, H, W)`` array, row-major order.

    Kernel parameters may be scalars or per-pixel ``(H, W)`` arrays.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        values = values[None]
    k, h, w = values.shape
    xs, ys = grid_centers(h, w)
    gx, gy = np.meshgrid(xs, ys)
    n = h * w

    def per_pixel(x):
        return np.broadcast_to(np.asarray(x, dtype=np.float64), (h, w)).reshape(n)

    return GaussianField(
        mu=np.stack([gx.reshape(n), gy.reshape(n)], axis=1),
        sigma_x_raw=per_pixel(sigma_x_raw),
        sigma_y_raw=per_pixel(sigma_y_raw),
        rho_raw=per_pixel(rho_raw),
        xi_raw=per_pixel(xi_raw),
        v=values.reshape(k, n).T,
        unit=grid_unit(h, w, pixels_per_unit),
    )


def render_point(p, field: GaussianField, normalization: Normalization | str = Normalization.PAPER_LITERAL) -> np.ndarray:
    """Exact value of the field at ``p``: the sum of every Gaussian's weighted density.

    No support truncation beyond the exponent floor.  This is the slow
    reference that the rasterizers are checked against.
    """
    if len(field) == 0:
        raise EmptyFieldError("cannot render an empty field")
    px, py = float(p[0]), float(p[1])
    if not (math.isfinite(px) and math.isfinite(py)):
        raise InvalidParameterError(f"query point must be finite, got {p}")
    ux, uy = field.unit
    out = np.zeros(field.channels)
    for g in field.gaussians:
        cov, _ = activate(g)
        local = ((px - g.mu[0]) / ux, (py - g.mu[1]) / uy)
        out += eval_density(local, (0.0, 0.0), cov, normalization) * blend_feature(g)
    return out
