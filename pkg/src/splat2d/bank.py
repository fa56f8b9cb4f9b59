"""Gaussian bank and selective Gaussian splatting.

A bank holds ``K`` kernel prototypes as raw ``(sigma_x, sigma_y, rho, xi)``
rows.  Every pixel carries ``K`` selection logits.  Training uses the Gumbel
softmax: weights ``w = softmax((logits + G) / tau)`` average the prototype rows
into per-pixel effective raw parameters, which are then activated as usual.
Inference uses the argmax (lowest index on ties).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import FormatError, InvalidParameterError, ShapeError
from .gauss import DEFAULT_PIXELS_PER_UNIT, SIGMOID_MARGIN, sigmoid

PROTO_FIELDS = ("sigma_x_raw", "sigma_y_raw", "rho_raw", "xi_raw")

DEFAULT_STD_RANGE = (0.3, 2.7)  # LR pixels
DEFAULT_OPACITY_RANGE = (0.25, 0.95)


def _logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), SIGMOID_MARGIN, 1.0 - SIGMOID_MARGIN)
    return np.log(p) - np.log1p(-p)


def _ramp(n: int, lo: float, hi: float, log: bool) -> np.ndarray:
    t = np.full(1, 0.5) if n == 1 else np.linspace(0.0, 1.0, n)
    if log:
        return np.exp(math.log(lo) + t * (math.log(hi) - math.log(lo)))
    return lo + t * (hi - lo)


@dataclass(frozen=True, eq=False)
class GaussianBank:
    """``K`` kernel prototypes, one raw parameter row each (see :data:`PROTO_FIELDS`)."""

    prototypes: np.ndarray
    init_scheme: str = "custom"

    def __post_init__(self):
        p = np.array(self.prototypes, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 4 or p.shape[0] < 1:
            raise ShapeError(f"prototypes must be (K >= 1, 4), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise InvalidParameterError("non-finite prototype parameters")
        p.setflags(write=False)
        object.__setattr__(self, "prototypes", p)

    @property
    def size(self) -> int:
        return self.prototypes.shape[0]

    def __len__(self) -> int:
        return self.size

    def activated(self, pixels_per_unit: float = DEFAULT_PIXELS_PER_UNIT) -> np.ndarray:
        """``(K, 3)`` rows of (std_x in pixels, std_y in pixels, opacity)."""
        sx, sy, _, xi = self.prototypes.T
        return np.stack(
            [np.sqrt(sigmoid(sx)) * pixels_per_unit, np.sqrt(sigmoid(sy)) * pixels_per_unit, sigmoid(xi)], axis=1
        ).reshape(-1, 3)

    def with_prototypes(self, prototypes) -> "GaussianBank":
        return GaussianBank(prototypes, self.init_scheme)


def init_bank(
    K: int,
    seed: int = 0,
    std_range=DEFAULT_STD_RANGE,
    opacity_range=DEFAULT_OPACITY_RANGE,
    jitter: float = 0.0,
    pixels_per_unit: float = DEFAULT_PIXELS_PER_UNIT,
) -> GaussianBank:
    """Stepwise grid of isotropic prototypes.

    ``ceil(sqrt(K))`` standard deviations, log-spaced over ``std_range`` (in LR
    pixels), are crossed with an opacity ramp; prototype ``i`` takes std step
    ``i // n_op`` and opacity step ``i % n_op``.  ``rho_raw`` is 0.  ``seed``
    only drives the optional ``jitter`` (Gaussian noise on the raw values).
    """
    if not isinstance(K, (int, np.integer)) or K < 1:
        raise InvalidParameterError(f"bank size must be an integer >= 1, got {K!r}")
    lo, hi = (float(x) for x in std_range)
    if not (0 < lo <= hi < pixels_per_unit):
        raise InvalidParameterError(f"std range {std_range} must lie in (0, {pixels_per_unit})")
    olo, ohi = (float(x) for x in opacity_range)
    if not (0 < olo <= ohi < 1):
        raise InvalidParameterError(f"opacity range {opacity_range} must lie in (0, 1)")
    n_sig = math.ceil(math.sqrt(K))
    n_op = math.ceil(K / n_sig)
    stds = _ramp(n_sig, lo, hi, log=True)
    ops = _ramp(n_op, olo, ohi, log=False)
    idx = np.arange(K)
    s_raw = _logit((stds[idx // n_op] / pixels_per_unit) ** 2)
    xi = _logit(ops[idx % n_op])
    protos = np.stack([s_raw, s_raw, np.zeros(K), xi], axis=1)
    if jitter:
        protos = protos + jitter * np.random.default_rng(seed).standard_normal(protos.shape)
    scheme = f"grid(std={lo:g}..{hi:g}px x{n_sig} log, opacity={olo:g}..{ohi:g} x{n_op}, jitter={jitter:g}, seed={seed})"
    return GaussianBank(protos, scheme)


def _check_logits(logits, bank: Optional[GaussianBank] = None) -> np.ndarray:
    lg = np.asarray(logits, dtype=np.float64)
    if lg.ndim < 1:
        raise ShapeError("logits need a trailing K axis")
    if bank is not None and lg.shape[-1] != bank.size:
        raise ShapeError(f"logits have {lg.shape[-1]} classes, bank has {bank.size}")
    if not np.all(np.isfinite(lg)):
        raise InvalidParameterError("non-finite selection logits")
    return lg


def softmax(x, axis: int = -1) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def gumbel_noise(shape, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).gumbel(size=shape)


class Selection(NamedTuple):
    """Result of a bank selection.

    ``weights`` are the per-pixel convex weights (one-hot for hard selection);
    ``params`` the ``(..., 4)`` effective raw parameters; ``index`` the argmax.
    ``hard_forward`` marks straight-through selections whose forward parameters
    are the argmax prototype while gradients use the soft weights.
    """

    weights: np.ndarray
    params: np.ndarray
    index: np.ndarray
    tau: float
    hard_forward: bool = False


def gumbel_soft_select(
    logits,
    bank: GaussianBank,
    tau: float = 1.0,
    seed: int = 0,
    hard_forward: bool = False,
    noise: Optional[np.ndarray] = None,
) -> Selection:
    """Gumbel-softmax selection; ``noise`` overrides the seeded Gumbel draw."""
    if not (tau > 0 and math.isfinite(tau)):
        raise InvalidParameterError(f"temperature must be positive, got {tau}")
    lg = _check_logits(logits, bank)
    g = gumbel_noise(lg.shape, seed) if noise is None else np.asarray(noise, dtype=np.float64)
    if g.shape != lg.shape:
        raise ShapeError(f"noise shape {g.shape} != logits shape {lg.shape}")
    noisy = lg + g
    w = softmax(noisy / tau)
    index = np.argmax(noisy, axis=-1)
    params = bank.prototypes[index] if hard_forward else w @ bank.prototypes
    return Selection(w, params, index, float(tau), hard_forward)


def hard_select(logits, bank: GaussianBank) -> Selection:
    """Argmax selection (ties go to the lowest index), no noise."""
    lg = _check_logits(logits, bank)
    index = np.argmax(lg, axis=-1)
    w = np.zeros_like(lg)
    np.put_along_axis(w, index[..., None], 1.0, axis=-1)
    return Selection(w, bank.prototypes[index], index, 0.0, True)


def straight_through_grad(weights, upstream, tau: float = 1.0) -> np.ndarray:
    """Logit gradient from ``upstream = dL/dweights`` through the tempered softmax."""
    w = np.asarray(weights, dtype=np.float64)
    u = np.asarray(upstream, dtype=np.float64)
    if w.shape != u.shape:
        raise ShapeError(f"weights {w.shape} and upstream {u.shape} differ")
    return w * (u - np.sum(w * u, axis=-1, keepdims=True)) / tau


def selection_backward(sel: Selection, bank: GaussianBank, grad_params) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. logits and prototypes from ``dL/d(effective params)``.

    Returns ``(d_logits, d_prototypes)``.  Soft selections backpropagate the
    exact Jacobian of the weighted average.  Hard-forward selections route the
    prototype gradient to the chosen entry and use the soft weights for logits
    (straight-through estimator).  Pure hard selections give zero logit gradient.
    """
    g = np.asarray(grad_params, dtype=np.float64)
    if g.shape != sel.params.shape:
        raise ShapeError(f"parameter gradient {g.shape} != selection params {sel.params.shape}")
    k = bank.size
    g2 = g.reshape(-1, 4)
    if sel.hard_forward:
        d_proto = np.zeros((k, 4))
        np.add.at(d_proto, sel.index.reshape(-1), g2)
    else:
        d_proto = sel.weights.reshape(-1, k).T @ g2
    if sel.tau == 0.0:
        return np.zeros_like(sel.weights), d_proto
    d_w = g @ bank.prototypes.T
    return straight_through_grad(sel.weights, d_w, sel.tau), d_proto


def anneal_tau(step: int, total: int, tau0: float = 1.0, tau_min: float = 0.1) -> float:
    """Exponential temperature schedule from ``tau0`` at step 0 to ``tau_min`` at ``total``."""
    if total <= 0:
        return tau0
    frac = min(max(step / total, 0.0), 1.0)
    return tau0 * (tau_min / tau0) ** frac


def selection_histogram(indices, K: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= K):
        raise InvalidParameterError(f"indices must lie in [0, {K})")
    return np.bincount(idx, minlength=K)


def heavily_used(counts, share: float = 0.01) -> int:
    """Number of bank entries selected by more than ``share`` of the pixels."""
    c = np.asarray(counts, dtype=np.float64)
    total = c.sum()
    return int(np.sum(c > share * total)) if total else 0


def write_histogram_csv(counts, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "count"])
        for i, c in enumerate(np.asarray(counts)):
            w.writerow([i, int(c)])


def read_histogram_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return np.array([int(r["count"]) for r in rows], dtype=np.int64)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad histogram CSV ({exc})") from exc


def dump_bank(bank: GaussianBank, path, pixels_per_unit: float = DEFAULT_PIXELS_PER_UNIT) -> None:
    """Write prototypes as CSV records; activated columns are for inspection only."""
    act = bank.activated(pixels_per_unit)
    with open(path, "w", newline="") as fh:
        fh.write(f"# init_scheme: {bank.init_scheme}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", *PROTO_FIELDS, "std_x_px", "std_y_px", "opacity"])
        for i, (row, a) in enumerate(zip(bank.prototypes, act)):
            w.writerow([i, *(repr(float(x)) for x in row), *(repr(float(x)) for x in a)])


def load_bank(path) -> GaussianBank:
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    scheme = "loaded"
    if lines and lines[0].startswith("#"):
        head = lines.pop(0)[1:].strip()
        if head.startswith("init_scheme:"):
            scheme = head.split(":", 1)[1].strip()
    try:
        rows = list(csv.DictReader(lines))
        protos = [[float(r[f]) for f in PROTO_FIELDS] for r in rows]
        order = [int(r["index"]) for r in rows]
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{path}: bad bank CSV ({exc})") from exc
    if order != list(range(len(rows))):
        raise FormatError(f"{path}: bank indices must be 0..K-1 in order")
    return GaussianBank(np.array(protos).reshape(-1, 4), scheme)
