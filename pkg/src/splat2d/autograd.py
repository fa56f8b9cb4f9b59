"""Hand-written reverse-mode gradients through rendering, Adam, and the fitting loop.

Gradient bookkeeping for one Gaussian with local offset ``d = (p - mu) / unit``,
inverse covariance ``P`` and density ``f = Z exp(-q / 2)``, ``q = d^T P d``,
given the upstream gradient ``g(p)`` of the rendered output:

* ``h(p) = g(p) . c`` is the gradient w.r.t. the density at ``p``;
* ``dL/dmu = sum h f P d / unit``;
* ``dL/dSigma = 1/2 P M P - k T P`` with ``M = sum h f d d^T``, ``T = sum h f``
  and ``k`` the determinant power of the normalization (1, 1/2 or 0);
* ``dL/dv = sigmoid(xi) sum f g`` and ``dL/dxi`` follows through the sigmoid.

The per-pixel sums come from the backend kernels; the rest is vectorized here.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from typing import Callable, Iterable, NamedTuple, Optional

import numpy as np

from . import _backend
from .errors import InvalidParameterError, NumericalError, ShapeError
from .gauss import EPS_PSD, GaussianField
from .metrics import psnr
from .render import RenderConfig, grid_centers, prepare, rasterize, support_boxes


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def loss_l1(pred, target) -> float:
    p, t = _as_array(pred), _as_array(target)
    if p.shape != t.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {t.shape}")
    return float(np.mean(np.abs(p - t)))


def loss_l1_grad(pred, target) -> np.ndarray:
    """Subgradient of :func:`loss_l1` w.r.t. ``pred`` (zero where the residual is zero)."""
    p, t = _as_array(pred), _as_array(target)
    if p.shape != t.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {t.shape}")
    return np.sign(p - t) / p.size


@dataclass
class ParamGradients:
    mu: np.ndarray
    sigma_x_raw: np.ndarray
    sigma_y_raw: np.ndarray
    rho_raw: np.ndarray
    xi_raw: np.ndarray
    v: np.ndarray
    # present when bank selection is part of the graph
    logits: Optional[np.ndarray] = None
    bank: Optional[np.ndarray] = None

    def as_dict(self) -> dict[str, np.ndarray]:
        out = {name: getattr(self, name) for name in GaussianField.PARAM_NAMES}
        if self.logits is not None:
            out["logits"] = self.logits
        if self.bank is not None:
            out["bank"] = self.bank
        return out

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.as_dict().values())


def _accumulate(prep, xs, ys, box, grad: np.ndarray, threads: int) -> np.ndarray:
    n, k = prep.color.shape
    acc = np.zeros((n, k + 6))
    kern = _backend.kernels()
    grad = np.ascontiguousarray(grad)
    if threads > 1 and n > 1:
        bounds = np.linspace(0, n, min(threads * 4, n) + 1).astype(int)
        chunks = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda ab: kern.backward_range(prep.mu, prep.icov, prep.z, prep.color, prep.unit, xs, ys, box, grad, ab[0], ab[1], acc), chunks))
    else:
        kern.backward_range(prep.mu, prep.icov, prep.z, prep.color, prep.unit, xs, ys, box, grad, 0, n, acc)
    return acc


def backward(
    field: GaussianField,
    cfg: RenderConfig,
    loss_grad,
    support: str = "tiled",
    rendered: Optional[np.ndarray] = None,
) -> ParamGradients:
    """Gradients of a scalar loss w.r.t. every raw parameter of ``field``.

    ``loss_grad`` is the gradient w.r.t. the output of the forward renderer with
    the same ``cfg`` and ``support``.  With ``cfg.clamp_output`` the clamp passes
    gradient only where the unclamped value lies in ``[0, 1]``; ``rendered`` may
    supply those unclamped values to avoid a second forward pass.
    """
    prep = prepare(field, cfg.normalization)
    g = _as_array(loss_grad)
    if g.ndim == 2:
        g = g[None]
    expected = (field.channels, cfg.out_height, cfg.out_width)
    if g.shape != expected:
        raise ShapeError(f"loss gradient has shape {g.shape}, expected {expected}")
    xs, ys = grid_centers(cfg.out_height, cfg.out_width, cfg.canvas)
    box = support_boxes(prep, xs, ys, cfg, support)
    if cfg.clamp_output:
        raw = rasterize(field, cfg, support) if rendered is None else np.asarray(rendered)
        g = g * ((raw >= 0.0) & (raw <= 1.0))
    acc = _accumulate(prep, xs, ys, box, g, cfg.threads)
    k = prep.color.shape[1]
    G = acc[:, :k]
    T, sdx, sdy, mxx, mxy, myy = acc[:, k:].T

    ux, uy = prep.unit
    d_mu = np.stack([sdx / ux, sdy / uy], axis=1)

    a, b, c = prep.icov.T
    # 1/2 P M P - power * T * P, P = [[a, b], [b, c]]
    pm00, pm01 = a * mxx + b * mxy, a * mxy + b * myy
    pm10, pm11 = b * mxx + c * mxy, b * mxy + c * myy
    power = cfg.normalization.det_power
    g_xx = 0.5 * (pm00 * a + pm01 * b) - power * T * a
    g_xy = 0.5 * (pm00 * b + pm01 * c) - power * T * b
    g_yy = 0.5 * (pm10 * b + pm11 * c) - power * T * c
    d_sxx, d_syy, d_sxy = g_xx, g_yy, 2.0 * g_xy

    s_xx, s_yy, s_xy = prep.s_xx, prep.s_yy, prep.s_xy
    d_sxx_total = d_sxx + d_sxy * s_xy / (2.0 * s_xx)
    d_syy_total = d_syy + d_sxy * s_xy / (2.0 * s_yy)
    t = np.tanh(field.rho_raw)
    op = prep.opacity
    return ParamGradients(
        mu=d_mu,
        sigma_x_raw=d_sxx_total * s_xx * (1.0 - s_xx),
        sigma_y_raw=d_syy_total * s_yy * (1.0 - s_yy),
        rho_raw=d_sxy * (1.0 - t * t) * np.sqrt(s_xx * s_yy) * (1.0 - EPS_PSD),
        xi_raw=op * (1.0 - op) * np.einsum("nk,nk->n", field.v, G),
        v=op[:, None] * G,
    )


@dataclass
class OptimState:
    """Adam moments plus a step-halving learning-rate schedule."""

    lr: float = 1e-4
    halve_every: Optional[int] = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = dc_field(default_factory=dict)
    v: dict = dc_field(default_factory=dict)

    def current_lr(self) -> float:
        if self.halve_every:
            return self.lr * 0.5 ** (self.step // self.halve_every)
        return self.lr


def step(
    params: dict,
    grads: dict,
    state: OptimState,
    lr: Optional[float] = None,
    lr_scale: Optional[dict] = None,
) -> tuple[dict, OptimState]:
    """One Adam update with bias correction; returns new params and state.

    Entries of ``params`` absent from ``grads`` are left untouched (frozen).
    ``lr_scale`` multiplies the rate for individual entries.  A non-finite
    gradient, or an update that overflows, rejects the whole step.
    """
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericalError(f"non-finite gradient for {', '.join(sorted(bad))} at step {state.step}")
    for k, g in grads.items():
        if k in params and np.shape(g) != np.shape(params[k]):
            raise ShapeError(f"gradient for {k} has shape {np.shape(g)}, parameter {np.shape(params[k])}")
    rate = state.current_lr() if lr is None else lr
    if not (math.isfinite(rate) and rate > 0):
        raise InvalidParameterError(f"learning rate must be positive and finite, got {rate}")
    t = state.step + 1
    new_m, new_v, new_params = dict(state.m), dict(state.v), dict(params)
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for k, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m = state.beta1 * state.m.get(k, np.zeros_like(g)) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v.get(k, np.zeros_like(g)) + (1.0 - state.beta2) * g * g
        new_m[k], new_v[k] = m, v
        k_rate = rate * (lr_scale or {}).get(k, 1.0)
        with np.errstate(over="ignore", invalid="ignore"):
            new_params[k] = params[k] - k_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if not np.all(np.isfinite(new_params[k])):
            raise NumericalError(f"Adam update overflowed for {k} at step {t} (learning rate {k_rate:g})")
    new_state = OptimState(
        lr=state.lr, halve_every=state.halve_every, beta1=state.beta1, beta2=state.beta2,
        eps=state.eps, step=t, m=new_m, v=new_v,
    )
    return new_params, new_state


class TraceRow(NamedTuple):
    step: int
    loss: float
    psnr: float


def fit_field(
    target,
    init: GaussianField,
    cfg: RenderConfig,
    steps: int,
    lr: float,
    freeze: Iterable[str] = (),
    halve_every: Optional[int] = None,
    support: str = "tiled",
    lr_scale: Optional[dict] = None,
    callback: Optional[Callable[[int, GaussianField, float], None]] = None,
) -> tuple[GaussianField, list[TraceRow]]:
    """Fit ``init`` to ``target`` by Adam on the L1 loss.

    The trace has ``steps + 1`` rows: row ``i`` holds the loss and PSNR of the
    field before update ``i``; the last row evaluates the returned field.
    ``lr_scale`` maps parameter groups to learning-rate multipliers.
    """
    if steps < 1:
        raise InvalidParameterError("steps must be >= 1")
    tgt = _as_array(target)
    if tgt.ndim == 2:
        tgt = tgt[None]
    cfg = cfg.resized(tgt.shape[1], tgt.shape[2])
    frozen = set(freeze)
    scales = dict(lr_scale or {})
    unknown = (frozen | set(scales)) - set(GaussianField.PARAM_NAMES)
    if unknown:
        raise InvalidParameterError(f"unknown parameter groups {sorted(unknown)}")
    state = OptimState(lr=lr, halve_every=halve_every)
    field = init
    trace: list[TraceRow] = []
    for i in range(steps + 1):
        raw = rasterize(field, cfg, support)
        pred = np.clip(raw, 0.0, 1.0) if cfg.clamp_output else raw
        loss = loss_l1(pred, tgt)
        trace.append(TraceRow(i, loss, psnr(np.clip(pred, 0.0, 1.0), tgt)))
        if callback is not None:
            callback(i, field, loss)
        if i == steps:
            break
        grads = backward(field, cfg, loss_l1_grad(pred, tgt), support, rendered=raw).as_dict()
        params = field.params()
        grads = {k: grads[k] for k in GaussianField.PARAM_NAMES if k not in frozen}
        params, state = step(params, grads, state, lr_scale=scales)
        field = field.with_params(**params)
    return field, trace


def write_trace_csv(trace: Iterable[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "psnr"])
        for row in trace:
            w.writerow([row.step, repr(float(row.loss)), repr(float(row.psnr))])


def read_trace_csv(path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        return [TraceRow(int(r["step"]), float(r["loss"]), float(r["psnr"])) for r in csv.DictReader(fh)]
