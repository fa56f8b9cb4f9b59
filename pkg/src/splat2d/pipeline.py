"""Arbitrary-scale upsampling pipeline with dual-stream feature decoupling.

``img -> feature_lift -> split channels``:

* bicubic stream: the leading ``channels_total - channels_splat`` channels are
  resampled with :func:`bicubic_resample`;
* splat stream: the trailing ``channels_splat`` channels are unfolded by ``r``,
  turned into one Gaussian per coarse pixel (:func:`lr_initialize`, kernel
  parameters from the bank selection), rendered on the coarse output grid and
  folded back.

The streams are concatenated in the original channel order and decoded by a
two-layer per-pixel MLP to the input channel count; the result is clamped to
``[0, 1]``.  The raw image channels occupy the first lifted slots, so an
"identity" decoder that copies those slots turns the pipeline into plain
bicubic upsampling whenever the splat stream does not touch them.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import bank as bank_mod
from .autograd import OptimState, TraceRow, backward, loss_l1, loss_l1_grad, step
from .bank import GaussianBank, Selection, init_bank
from .errors import FormatError, InvalidParameterError, ShapeError, ValidationError
from .gauss import DEFAULT_PIXELS_PER_UNIT, GaussianField, Normalization, grid_centers, grid_unit
from .metrics import psnr
from .render import FeatureGrid, RenderConfig, rasterize, scaled_size


@dataclass(frozen=True)
class PipelineConfig:
    channels_total: int = 64
    channels_splat: int = 8
    unfold_factor: int = 2
    bank_size: int = 100
    decode_hidden: int = 64
    scale: float = 2.0
    tau: float = 1.0
    tau_min: float = 0.1
    normalization: str = "unnormalized"
    support_radius_sigmas: float = 4.0

    def __post_init__(self):
        for name in ("channels_total", "channels_splat", "unfold_factor", "bank_size", "decode_hidden"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise InvalidParameterError(f"{name} must be an integer, got {value!r}")
        if self.channels_total < 1:
            raise InvalidParameterError("channels_total must be >= 1")
        if not 0 <= self.channels_splat <= self.channels_total:
            raise InvalidParameterError("channels_splat must lie in [0, channels_total]")
        if self.unfold_factor < 1 or self.bank_size < 1 or self.decode_hidden < 1:
            raise InvalidParameterError("unfold_factor, bank_size and decode_hidden must be >= 1")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise InvalidParameterError(f"scale must be positive, got {self.scale}")
        if not (0 < self.tau_min <= self.tau and math.isfinite(self.tau)):
            raise InvalidParameterError("need 0 < tau_min <= tau")
        Normalization.parse(self.normalization)
        if not self.support_radius_sigmas > 0:
            raise InvalidParameterError("support_radius_sigmas must be positive")

    @property
    def channels_bicubic(self) -> int:
        return self.channels_total - self.channels_splat

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------- config files


def _convert(field: dataclasses.Field, text: str):
    kind = field.type if isinstance(field.type, str) else getattr(field.type, "__name__", "")
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError as exc:
        raise FormatError(f"{field.name}: cannot parse {text!r} as {kind}") from exc
    return text


def parse_config_text(text: str, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; keys are field names."""
    fields = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    changes = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise FormatError(f"line {lineno}: unknown key {key!r}")
        if key in changes:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        changes[key] = _convert(fields[key], value)
    return dataclasses.replace(base or PipelineConfig(), **changes)


def load_config(path, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base)


def format_config(cfg: PipelineConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))


def save_config(cfg: PipelineConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))


# -------------------------------------------------------------- feature files

FEATURE_MAGIC = b"S2DF"
_HEADER = struct.Struct("<4sIII")


def save_features(grid, path) -> None:
    """Header ``(magic, channels, height, width)`` as little-endian uint32, then float32 data."""
    data = _data(grid)
    c, h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, c, h, w))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_features(path) -> FeatureGrid:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated feature header")
    magic, c, h, w = _HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * c * h * w
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(c, h, w)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: non-finite feature values")
    return FeatureGrid(data.astype(np.float64))


# ------------------------------------------------------------------ primitives


def _data(x) -> np.ndarray:
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) grid, got shape {arr.shape}")
    return arr


def lift_matrix(in_channels: int, channels_total: int, seed: int = 0) -> np.ndarray:
    """``(channels_total, in_channels)`` lift: identity on top, seeded orthonormal block below."""
    extra = channels_total - in_channels
    if extra < 0:
        raise ShapeError(f"cannot lift {in_channels} channels to {channels_total}")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((max(extra, in_channels), in_channels)))
    proj = q[:extra] if extra >= in_channels else q[:extra] / np.linalg.norm(q[:extra], axis=1, keepdims=True)
    return np.vstack([np.eye(in_channels), proj])


def feature_lift(img, channels_total: int = 64, seed: int = 0) -> FeatureGrid:
    """Fixed linear stand-in for the encoder: raw channels, then seeded projections."""
    x = _data(img)
    if x.shape[0] not in (1, 3):
        raise ShapeError(f"feature_lift expects 1 or 3 channels, got {x.shape[0]}")
    m = lift_matrix(x.shape[0], channels_total, seed)
    return FeatureGrid(np.tensordot(m, x, axes=1))


def unfold(features, r: int) -> FeatureGrid:
    """Space-to-depth; output channel ``c * r*r + di * r + dj`` holds sub-position ``(di, dj)``."""
    x = _data(features)
    c, h, w = x.shape
    if r < 1 or h % r or w % r:
        raise ShapeError(f"height {h} and width {w} must be divisible by r={r}")
    y = x.reshape(c, h // r, r, w // r, r).transpose(0, 2, 4, 1, 3)
    return FeatureGrid(y.reshape(c * r * r, h // r, w // r))


def fold(features, r: int) -> FeatureGrid:
    """Depth-to-space, the exact inverse of :func:`unfold`."""
    x = _data(features)
    c, h, w = x.shape
    if r < 1 or c % (r * r):
        raise ShapeError(f"channels {c} must be divisible by r*r={r * r}")
    y = x.reshape(c // (r * r), r, r, h, w).transpose(0, 3, 1, 4, 2)
    return FeatureGrid(y.reshape(c // (r * r), h * r, w * r))


def cubic_kernel(t, a: float = -0.5):
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def bicubic_matrix(n_in: int, n_out: int, a: float = -0.5, antialias: bool = False) -> np.ndarray:
    """``(n_out, n_in)`` resampling matrix with half-pixel centers and clamped edges.

    By default the kernel is evaluated in source-pixel units at every scale.
    ``antialias=True`` stretches it by ``n_in / n_out`` when shrinking and
    renormalizes each row, like MATLAB ``imresize``.
    """
    if n_in < 1 or n_out < 1:
        raise ShapeError("bicubic sizes must be >= 1")
    ratio = n_in / n_out
    stretch = ratio if (antialias and ratio > 1.0) else 1.0
    src = (np.arange(n_out) + 0.5) * ratio - 0.5
    reach = int(math.ceil(2.0 * stretch))
    base = np.floor(src).astype(np.int64)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for off in range(1 - reach, reach + 1):
        tap = base + off
        np.add.at(m, (rows, np.clip(tap, 0, n_in - 1)), cubic_kernel((src - tap) / stretch, a))
    if stretch != 1.0:
        m /= m.sum(axis=1, keepdims=True)
    return m


def bicubic_resample(features, out_h: int, out_w: int, antialias: bool = False) -> FeatureGrid:
    x = _data(features)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be >= 1, got {out_h}x{out_w}")
    my = bicubic_matrix(x.shape[1], out_h, antialias=antialias)
    mx = bicubic_matrix(x.shape[2], out_w, antialias=antialias)
    return FeatureGrid(np.einsum("yh,chw,xw->cyx", my, x, mx, optimize=True))


# ------------------------------------------------------------ LR initialization


def _check_selection_inputs(feats: np.ndarray, bank: GaussianBank, logits) -> np.ndarray:
    lg = np.asarray(logits, dtype=np.float64)
    expected = (feats.shape[1], feats.shape[2], bank.size)
    if lg.shape != expected:
        raise ShapeError(f"logits shape {lg.shape}, expected {expected}")
    return lg


def select(logits, bank: GaussianBank, mode: str = "hard", tau: float = 1.0, seed: int = 0) -> Selection:
    """Bank selection by mode: ``hard`` (noise-free argmax), ``soft`` (Gumbel softmax)
    or ``st`` (straight-through: hard argmax of the noised logits forward, soft backward)."""
    if mode == "hard":
        return bank_mod.hard_select(logits, bank)
    if mode == "soft":
        return bank_mod.gumbel_soft_select(logits, bank, tau, seed)
    if mode == "st":
        return bank_mod.gumbel_soft_select(logits, bank, tau, seed, hard_forward=True)
    raise InvalidParameterError(f"unknown selection mode {mode!r}")


def field_from_selection(features, sel: Selection, pixels_per_unit: float = DEFAULT_PIXELS_PER_UNIT) -> GaussianField:
    feats = _data(features)
    c, h, w = feats.shape
    xs, ys = grid_centers(h, w)
    gx, gy = np.meshgrid(xs, ys)
    p = sel.params.reshape(h * w, 4)
    return GaussianField(
        mu=np.stack([gx.ravel(), gy.ravel()], axis=1),
        sigma_x_raw=p[:, 0],
        sigma_y_raw=p[:, 1],
        rho_raw=p[:, 2],
        xi_raw=p[:, 3],
        v=feats.reshape(c, h * w).T,
        unit=grid_unit(h, w, pixels_per_unit),
    )


def lr_initialize(features, bank: GaussianBank, logits, mode: str = "hard", tau: float = 1.0, seed: int = 0) -> GaussianField:
    """One Gaussian per pixel: center at the pixel center, amplitude = feature vector,
    kernel parameters from the bank selection; row-major order."""
    feats = _data(features)
    lg = _check_selection_inputs(feats, bank, logits)
    return field_from_selection(feats, select(lg, bank, mode, tau, seed))


def selection_grads(grads, sel: Selection, bank: GaussianBank, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Map per-Gaussian kernel gradients of a selected field to (logits, prototypes)."""
    g = np.stack([grads.sigma_x_raw, grads.sigma_y_raw, grads.rho_raw, grads.xi_raw], axis=1)
    return bank_mod.selection_backward(sel, bank, g.reshape(*shape, 4))


# --------------------------------------------------------------------- decoder


@dataclass(frozen=True, eq=False)
class DecodeHead:
    """``out = W2 relu(W1 x + b1) + b2`` applied per pixel."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    PARAM_NAMES = ("w1", "b1", "w2", "b2")

    def __post_init__(self):
        arrays = {n: np.array(getattr(self, n), dtype=np.float64) for n in self.PARAM_NAMES}
        hid, cin = arrays["w1"].shape
        cout = arrays["w2"].shape[0]
        if arrays["b1"].shape != (hid,) or arrays["w2"].shape != (cout, hid) or arrays["b2"].shape != (cout,):
            raise ShapeError("inconsistent decode head shapes")
        for n, a in arrays.items():
            a.setflags(write=False)
            object.__setattr__(self, n, a)

    @classmethod
    def identity(cls, c_in: int, c_out: int, hidden: int) -> "DecodeHead":
        """Copies the first ``c_out`` input channels (exact for nonnegative inputs)."""
        if hidden < c_out or c_in < c_out:
            raise ShapeError("identity decode needs hidden >= c_out and c_in >= c_out")
        w1 = np.zeros((hidden, c_in))
        w1[:c_out, :c_out] = np.eye(c_out)
        w2 = np.zeros((c_out, hidden))
        w2[:, :c_out] = np.eye(c_out)
        return cls(w1, np.zeros(hidden), w2, np.zeros(c_out))

    @classmethod
    def seeded(cls, c_in: int, c_out: int, hidden: int, seed: int = 0) -> "DecodeHead":
        """Identity head whose spare hidden units get seeded random input weights.

        The spare units start with zero output weights, so the head initially
        copies the raw slots; their unit bias keeps them in the linear part of
        the ReLU at first, so training starts from an affine read-out.
        """
        head = cls.identity(c_in, c_out, hidden)
        rng = np.random.default_rng(seed)
        w1 = head.w1.copy()
        w1[c_out:] = rng.standard_normal((hidden - c_out, c_in)) / math.sqrt(c_in)
        b1 = head.b1.copy()
        b1[c_out:] = 1.0
        return cls(w1, b1, head.w2, head.b2)

    def params(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n).copy() for n in self.PARAM_NAMES}

    def with_params(self, **arrays) -> "DecodeHead":
        return DecodeHead(**{n: arrays.get(n, getattr(self, n)) for n in self.PARAM_NAMES})

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns ``(out, hidden_preactivation)``."""
        pre = np.einsum("hc,cyx->hyx", self.w1, x) + self.b1[:, None, None]
        out = np.einsum("oh,hyx->oyx", self.w2, np.maximum(pre, 0.0)) + self.b2[:, None, None]
        return out, pre

    def backward(self, x: np.ndarray, pre: np.ndarray, g_out: np.ndarray) -> tuple[dict, np.ndarray]:
        act = np.maximum(pre, 0.0)
        g_pre = np.einsum("oh,oyx->hyx", self.w2, g_out) * (pre > 0.0)
        grads = {
            "w2": np.einsum("oyx,hyx->oh", g_out, act),
            "b2": g_out.sum(axis=(1, 2)),
            "w1": np.einsum("hyx,cyx->hc", g_pre, x),
            "b1": g_pre.sum(axis=(1, 2)),
        }
        return grads, np.einsum("hc,hyx->cyx", self.w1, g_pre)


# ---------------------------------------------------------------------- model


@dataclass(frozen=True, eq=False)
class PipelineModel:
    """All pipeline weights: fixed lift, logit map, bank and decoder."""

    cfg: PipelineConfig
    in_channels: int
    lift: np.ndarray
    logit_w: np.ndarray  # (K, channels_splat * r * r)
    logit_b: np.ndarray  # (K,)
    bank: GaussianBank
    head: DecodeHead

    TRAINABLE = ("logit_w", "logit_b", "bank", "w1", "b1", "w2", "b2")

    @classmethod
    def create(cls, cfg: PipelineConfig, in_channels: int = 3, seed: int = 0, bank: Optional[GaussianBank] = None) -> "PipelineModel":
        if in_channels not in (1, 3):
            raise ShapeError(f"pipeline expects 1 or 3 input channels, got {in_channels}")
        if cfg.channels_total < in_channels:
            raise InvalidParameterError("channels_total must be at least the input channel count")
        # the lift uses ``seed`` itself so that it equals feature_lift(img, C, seed)
        seeds = [seed] + [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(2)]
        bank = bank if bank is not None else init_bank(cfg.bank_size, seed)
        if bank.size != cfg.bank_size:
            raise ShapeError(f"bank has {bank.size} entries, config says {cfg.bank_size}")
        d = cfg.channels_splat * cfg.unfold_factor**2
        rng = np.random.default_rng(seeds[1])
        logit_w = rng.standard_normal((cfg.bank_size, d)) / math.sqrt(max(d, 1))
        return cls(
            cfg=cfg,
            in_channels=in_channels,
            lift=lift_matrix(in_channels, cfg.channels_total, seeds[0]),
            logit_w=logit_w,
            logit_b=np.zeros(cfg.bank_size),
            bank=bank,
            head=DecodeHead.seeded(cfg.channels_total, in_channels, max(cfg.decode_hidden, in_channels), seeds[2]),
        )

    def params(self) -> dict[str, np.ndarray]:
        out = {"logit_w": self.logit_w.copy(), "logit_b": self.logit_b.copy(), "bank": self.bank.prototypes.copy()}
        out.update(self.head.params())
        return out

    def with_params(self, **p) -> "PipelineModel":
        return dataclasses.replace(
            self,
            logit_w=np.asarray(p.get("logit_w", self.logit_w)),
            logit_b=np.asarray(p.get("logit_b", self.logit_b)),
            bank=self.bank.with_prototypes(p["bank"]) if "bank" in p else self.bank,
            head=self.head.with_params(**{k: v for k, v in p.items() if k in DecodeHead.PARAM_NAMES}),
        )

    def lift_features(self, img) -> np.ndarray:
        x = _data(img)
        if x.shape[0] != self.in_channels:
            raise ShapeError(f"model expects {self.in_channels} channels, got {x.shape[0]}")
        return np.tensordot(self.lift, x, axes=1)

    def logits(self, unfolded: np.ndarray) -> np.ndarray:
        """Per-coarse-pixel ``(h, w, K)`` logits from the unfolded splat features."""
        return np.einsum("kd,dyx->yxk", self.logit_w, unfolded) + self.logit_b


def _render_cfg(cfg: PipelineConfig, coarse_h: int, coarse_w: int, out_h: int, out_w: int, threads: int) -> RenderConfig:
    r = cfg.unfold_factor
    # coarse grid covers ceil(out/r) * r fine pixels; the fold overhang is cropped
    canvas = (0.0, 0.0, coarse_w * r / out_w, coarse_h * r / out_h)
    return RenderConfig(
        out_width=coarse_w,
        out_height=coarse_h,
        normalization=Normalization.parse(cfg.normalization),
        support_radius_sigmas=cfg.support_radius_sigmas,
        canvas=canvas,
        threads=threads,
    )


@dataclass
class _Cache:
    feats: np.ndarray
    unfolded: Optional[np.ndarray]
    sel: Optional[Selection]
    field: Optional[GaussianField]
    rcfg: Optional[RenderConfig]
    fused: np.ndarray
    pre: np.ndarray
    raw_out: np.ndarray


def dual_stream(
    model: PipelineModel,
    img,
    out_h: int,
    out_w: int,
    mode: str = "hard",
    tau: Optional[float] = None,
    seed: int = 0,
    logits=None,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray, _Cache]:
    """Both streams before fusion: ``(bicubic_part, splat_part, cache)``."""
    cfg = model.cfg
    feats = model.lift_features(img)
    cb = cfg.channels_bicubic
    bic = bicubic_resample(feats[:cb], out_h, out_w).data if cb else np.zeros((0, out_h, out_w))
    cache = _Cache(feats, None, None, None, None, np.empty(0), np.empty(0), np.empty(0))
    if cfg.channels_splat == 0:
        return bic, np.zeros((0, out_h, out_w)), cache
    r = cfg.unfold_factor
    unfolded = unfold(feats[cb:], r).data
    lg = model.logits(unfolded) if logits is None else np.asarray(logits, dtype=np.float64)
    _check_selection_inputs(unfolded, model.bank, lg)
    sel = select(lg, model.bank, mode, cfg.tau if tau is None else tau, seed)
    field = field_from_selection(unfolded, sel)
    ch, cw = -(-out_h // r), -(-out_w // r)
    rcfg = _render_cfg(cfg, ch, cw, out_h, out_w, threads)
    splat = fold(rasterize(field, rcfg), r).data[:, :out_h, :out_w]
    cache.unfolded, cache.sel, cache.field, cache.rcfg = unfolded, sel, field, rcfg
    return bic, splat, cache


def _forward(model, img, out_h, out_w, mode, tau, seed, logits, threads):
    bic, splat, cache = dual_stream(model, img, out_h, out_w, mode, tau, seed, logits, threads)
    fused = np.concatenate([bic, splat], axis=0)
    raw, pre = model.head.forward(fused)
    cache.fused, cache.pre, cache.raw_out = fused, pre, raw
    return np.clip(raw, 0.0, 1.0), cache


def target_size(h: int, w: int, scale: float) -> tuple[int, int]:
    return scaled_size(h, scale), scaled_size(w, scale)


def upsample(
    img,
    cfg: Optional[PipelineConfig] = None,
    bank: Optional[GaussianBank] = None,
    logits=None,
    mode: str = "hard",
    *,
    model: Optional[PipelineModel] = None,
    seed: int = 0,
    out_size: Optional[tuple[int, int]] = None,
    threads: int = 1,
) -> FeatureGrid:
    """Upsample ``img`` by ``cfg.scale`` (or to ``out_size``) through the full pipeline.

    Without ``model`` a fresh seeded model is built from ``cfg``; ``bank`` and
    ``logits`` override the model's bank and its logit map.
    """
    x = _data(img)
    if model is None:
        model = PipelineModel.create(cfg or PipelineConfig(), x.shape[0], seed, bank)
    elif bank is not None:
        model = dataclasses.replace(model, bank=bank)
    if cfg is not None and cfg != model.cfg:
        model = dataclasses.replace(model, cfg=cfg)
    oh, ow = out_size or target_size(x.shape[1], x.shape[2], model.cfg.scale)
    out, _ = _forward(model, x, oh, ow, mode, None, seed, logits, threads)
    return FeatureGrid(out)


def pipeline_grads(model: PipelineModel, img, target, mode: str, tau: float, seed: int, threads: int = 1):
    """L1 loss of the clamped output and gradients for :attr:`PipelineModel.TRAINABLE`."""
    tgt = _data(target)
    out, cache = _forward(model, img, tgt.shape[1], tgt.shape[2], mode, tau, seed, None, threads)
    loss = loss_l1(out, tgt)
    g_out = loss_l1_grad(out, tgt) * ((cache.raw_out >= 0.0) & (cache.raw_out <= 1.0))
    grads, g_fused = model.head.backward(cache.fused, cache.pre, g_out)
    cfg = model.cfg
    grads["logit_w"] = np.zeros_like(model.logit_w)
    grads["logit_b"] = np.zeros_like(model.logit_b)
    grads["bank"] = np.zeros_like(model.bank.prototypes)
    if cfg.channels_splat and mode != "hard":
        r = cfg.unfold_factor
        rc = cache.rcfg
        g_splat = np.zeros((cfg.channels_splat, rc.out_height * r, rc.out_width * r))
        g_splat[:, : tgt.shape[1], : tgt.shape[2]] = g_fused[cfg.channels_bicubic :]
        g_coarse = unfold(g_splat, r).data
        fg = backward(cache.field, rc, g_coarse)
        d_logits, d_bank = selection_grads(fg, cache.sel, model.bank, cache.unfolded.shape[1:])
        grads["logit_w"] = np.einsum("yxk,dyx->kd", d_logits, cache.unfolded)
        grads["logit_b"] = d_logits.sum(axis=(0, 1))
        grads["bank"] = d_bank
    return loss, out, grads


def fit_pipeline(
    model: PipelineModel,
    pairs: list[tuple[np.ndarray, np.ndarray]],
    steps: int,
    lr: float = 1e-3,
    mode: str = "soft",
    seed: int = 0,
    threads: int = 1,
    lr_scale: Optional[dict] = None,
) -> tuple[PipelineModel, list[TraceRow]]:
    """Adam on the mean L1 loss over ``(lr_image, hr_image)`` pairs.

    The Gumbel temperature anneals from ``cfg.tau`` to ``cfg.tau_min``; step
    ``i`` draws Gumbel noise from seed ``seed + i``.  Trace PSNR is the mean
    over pairs of the training-mode output.  ``lr_scale`` multiplies the rate
    of individual parameter groups (names in :attr:`PipelineModel.TRAINABLE`).
    """
    if steps < 1:
        raise InvalidParameterError("steps must be >= 1")
    if not pairs:
        raise ValidationError("fit_pipeline needs at least one image pair")
    state = OptimState(lr=lr)
    trace = []
    for i in range(steps):
        tau = bank_mod.anneal_tau(i, steps, model.cfg.tau, model.cfg.tau_min)
        total = {}
        losses, psnrs = [], []
        for lr_img, hr_img in pairs:
            loss, out, grads = pipeline_grads(model, lr_img, hr_img, mode, tau, seed + i, threads)
            losses.append(loss)
            psnrs.append(psnr(out, hr_img))
            for k, g in grads.items():
                total[k] = total.get(k, 0.0) + g / len(pairs)
        trace.append(TraceRow(i, float(np.mean(losses)), float(np.mean(psnrs))))
        if model.cfg.channels_splat == 0:
            total = {k: total[k] for k in DecodeHead.PARAM_NAMES}
        params, state = step(model.params(), total, state, lr_scale=lr_scale)
        model = model.with_params(**params)
    return model, trace
