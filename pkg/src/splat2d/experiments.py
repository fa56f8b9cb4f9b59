"""Scripted desk-scale experiments and their JSON reports.

Every study returns an :class:`ExperimentReport`.  Its *payload* holds only
deterministic content (parameters, result rows, summary, written file names)
and is hashed; wall-clock time, timestamps, thread count and backend go in
``meta``, outside the hash.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field
from importlib import resources
from typing import Optional, Sequence

import jsonschema
import numpy as np

from . import _backend
from .autograd import fit_field, write_trace_csv
from .bank import dump_bank, heavily_used, selection_histogram, write_histogram_csv
from .errors import InvalidParameterError, ShapeError, ValidationError
from .gauss import GaussianField, field_from_grid, grid_centers
from .imageio import load_image, save_image
from .metrics import psnr, to_luma
from .pipeline import (PipelineConfig, PipelineModel, bicubic_resample, fit_pipeline, save_features, select, unfold,
                       upsample)
from .render import RenderConfig, rasterize, render_at_scale, render_points, scaled_size

SCHEMA_VERSION = 1
BUNDLED_CROPS = ("astronaut.ppm", "coffee.ppm", "chelsea.ppm")
OVERFIT_CROP = "camera.pgm"

# --------------------------------------------------------------------- data


def data_dir() -> str:
    return str(resources.files("splat2d") / "data")


def dataset_root() -> str:
    """``$SPLAT2D_DATA`` when set, else the bundled crop directory."""
    return os.environ.get("SPLAT2D_DATA") or data_dir()


def bundled(name: str) -> str:
    return os.path.join(data_dir(), name)


def _image(x) -> np.ndarray:
    if isinstance(x, (str, os.PathLike)):
        return load_image(x).data
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    return arr[None] if arr.ndim == 2 else arr


def synthesize_lr(hr, scale: float, antialias: bool = True) -> np.ndarray:
    """Bicubic LR of ``round(H / scale) x round(W / scale)``.

    ``antialias=True`` (the default) stretches the kernel when shrinking, the
    MATLAB ``imresize`` degradation used by SR benchmarks.
    """
    x = _image(hr)
    if not (scale > 0 and math.isfinite(scale)):
        raise InvalidParameterError(f"scale must be positive, got {scale}")
    h, w = scaled_size(x.shape[1], 1.0 / scale), scaled_size(x.shape[2], 1.0 / scale)
    return bicubic_resample(x, h, w, antialias=antialias).data


# ------------------------------------------------------------------- report

_VALUE = {"type": ["number", "string", "integer", "boolean", "null", "array", "object"]}


def _schema(kind: str) -> dict:
    rows_req, summary_req = KIND_FIELDS[kind]
    return {
        "type": "object",
        "required": ["schema_version", "payload", "payload_sha256", "meta"],
        "properties": {
            "schema_version": {"const": SCHEMA_VERSION},
            "payload_sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
            "meta": {
                "type": "object",
                "required": ["runtime_ms", "created_unix", "threads", "backend"],
                "properties": {"runtime_ms": {"type": "number", "minimum": 0}, "threads": {"type": "integer", "minimum": 1}},
            },
            "payload": {
                "type": "object",
                "required": ["kind", "params", "rows", "summary", "files"],
                "additionalProperties": False,
                "properties": {
                    "kind": {"const": kind},
                    "params": {"type": "object"},
                    "rows": {
                        "type": "array",
                        "items": {"type": "object", "required": ["config_hash", *rows_req], "additionalProperties": _VALUE},
                    },
                    "summary": {"type": "object", "required": list(summary_req), "additionalProperties": _VALUE},
                    "files": {"type": "array", "items": {"type": "string"}},
                },
            },
        },
    }


KIND_FIELDS = {
    "overfit": (("fraction", "grid", "gaussians", "initial_psnr", "final_psnr", "final_loss"), ("best_psnr", "sweep_non_decreasing")),
    "noisy_init": (
        ("noise", "draws", "mean_steps_to_reach", "final_psnr_min", "final_psnr_max", "final_loss_mean"),
        ("final_psnr_spread", "reach_monotone", "loss_within_5pct"),
    ),
    "scale_suite": (("scale", "height", "width", "expected_height", "expected_width", "finite", "in_range"), ("all_valid", "max_consistency_error")),
    "ablation": (("channels_splat", "bank_size", "mean_psnr"), ("best_config",)),
    "bank_hist": (("image", "pixels"), ("bank_size", "pixels", "heavily_used", "used_entries")),
    "psnr": (("a", "b", "psnr"), ("psnr",)),
    "synth_lr": (("input", "output", "scale", "height", "width"), ("count",)),
}


def _jsonable(x):
    """Plain JSON types; non-finite floats become the strings ``"inf"``, ``"-inf"``, ``"nan"``."""
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        v = float(x)
        return v if math.isfinite(v) else ("nan" if math.isnan(v) else ("inf" if v > 0 else "-inf"))
    return x


def canonical_json(obj) -> bytes:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


@dataclass
class ExperimentReport:
    kind: str
    params: dict
    rows: list
    summary: dict
    files: list = dc_field(default_factory=list)
    meta: dict = dc_field(default_factory=dict)

    def config_hash(self) -> str:
        """Hash of the parameter snapshot; stamped on every row that lacks its own."""
        return hashlib.sha256(canonical_json(self.params)).hexdigest()[:16]

    def payload(self) -> dict:
        h = self.config_hash()
        rows = [{"config_hash": h, **r} for r in self.rows]
        return _jsonable({"kind": self.kind, "params": self.params, "rows": rows, "summary": self.summary, "files": sorted(self.files)})

    def payload_bytes(self) -> bytes:
        return canonical_json(self.payload())

    def payload_sha256(self) -> str:
        return hashlib.sha256(self.payload_bytes()).hexdigest()

    def to_dict(self) -> dict:
        meta = {"runtime_ms": 0.0, "created_unix": 0.0, "threads": 1, "backend": _backend.name()}
        meta.update(self.meta)
        return {
            "schema_version": SCHEMA_VERSION,
            "payload": self.payload(),
            "payload_sha256": self.payload_sha256(),
            "meta": _jsonable(meta),
        }

    def validate(self) -> dict:
        if self.kind not in KIND_FIELDS:
            raise ValidationError(f"unknown report kind {self.kind!r}")
        doc = self.to_dict()
        try:
            jsonschema.validate(doc, _schema(self.kind))
        except jsonschema.ValidationError as exc:
            raise ValidationError(f"{self.kind} report failed schema validation: {exc.message}") from exc
        return doc

    def write(self, path) -> None:
        doc = self.validate()
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")


def load_report(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    kind = doc.get("payload", {}).get("kind")
    if kind not in KIND_FIELDS:
        raise ValidationError(f"{path}: unknown report kind {kind!r}")
    try:
        jsonschema.validate(doc, _schema(kind))
    except jsonschema.ValidationError as exc:
        raise ValidationError(f"{path}: {exc.message}") from exc
    if hashlib.sha256(canonical_json(doc["payload"])).hexdigest() != doc["payload_sha256"]:
        raise ValidationError(f"{path}: payload hash mismatch")
    return doc


class _Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.ms = 1000.0 * (time.perf_counter() - self.t0)


def _meta(timer: _Timer, threads: int) -> dict:
    return {"runtime_ms": round(timer.ms, 3), "created_unix": round(time.time(), 3), "threads": threads, "backend": _backend.name()}


def _out_path(out_dir: Optional[str], name: str, files: list) -> Optional[str]:
    if out_dir is None:
        return None
    os.makedirs(out_dir, exist_ok=True)
    files.append(name)
    return os.path.join(out_dir, name)


# -------------------------------------------------------- field initializers

OVERFIT_STD_PX = 0.4
OVERFIT_XI = 1.66


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def kernel_gain(h: int, w: int, sigma_x_raw, sigma_y_raw, rho_raw, xi_raw, normalization="unnormalized") -> float:
    """Value at an interior grid center of an ``h x w`` grid field with unit amplitudes."""
    ones = field_from_grid(np.ones((1, h, w)), sigma_x_raw, sigma_y_raw, rho_raw, xi_raw)
    xs, ys = grid_centers(h, w)
    cfg = RenderConfig(out_width=w, out_height=h, normalization=normalization)
    return float(render_points(ones, np.array([[xs[w // 2], ys[h // 2]]]), cfg)[0, 0])


def grid_init(values, std_px: float, xi_raw: float, normalization="unnormalized") -> GaussianField:
    """Grid field whose kernels have std ``std_px`` grid pixels and whose
    amplitudes are ``values`` divided by the kernel partition gain, so a
    constant input renders as (approximately) itself."""
    v = _image(values)
    _, h, w = v.shape
    s = _logit((std_px / 3.0) ** 2)
    gain = kernel_gain(h, w, s, s, 0.0, xi_raw, normalization)
    return field_from_grid(v / gain, s, s, 0.0, xi_raw)


def _reach(psnrs: np.ndarray, margin: float = 1.0) -> int:
    """First step whose PSNR is within ``margin`` dB of the final PSNR."""
    return int(np.argmax(psnrs >= psnrs[-1] - margin))


# ------------------------------------------------------------------ overfit


def run_overfit(
    image=None,
    steps: int = 2000,
    lr: float = 2e-3,
    fractions: Sequence[float] = (1 / 16, 1 / 4, 1.0),
    mu_lr_scale: float = 0.01,
    out_dir: Optional[str] = None,
    threads: int = 1,
) -> ExperimentReport:
    """Fit Gaussian grids of several densities to one grayscale image (L1, Adam).

    A fraction ``f`` uses a ``round(H sqrt f) x round(W sqrt f)`` grid initialized
    from the antialiased bicubic downsample of the target; every parameter
    trains, centers at ``mu_lr_scale`` times the rate.
    """
    with _Timer() as timer:
        path = image if image is not None else bundled(OVERFIT_CROP)
        target = _image(path)
        if target.shape[0] == 3:
            target = to_luma(target)[None]
        _, h, w = target.shape
        cfg = RenderConfig(out_width=w, out_height=h, normalization="unnormalized", threads=threads)
        rows, files = [], []
        for f in fractions:
            if not 0 < f <= 1:
                raise InvalidParameterError(f"fraction must lie in (0, 1], got {f}")
            gh, gw = max(1, round(h * math.sqrt(f))), max(1, round(w * math.sqrt(f)))
            small = bicubic_resample(target, gh, gw, antialias=True).data
            init = grid_init(small, OVERFIT_STD_PX, OVERFIT_XI)
            field, trace = fit_field(target, init, cfg, steps, lr, lr_scale={"mu": mu_lr_scale})
            tag = f"{gh}x{gw}"
            trace_path = _out_path(out_dir, f"overfit_trace_{tag}.csv", files)
            if trace_path:
                write_trace_csv(trace, trace_path)
                save_image(np.clip(rasterize(field, cfg), 0, 1), _out_path(out_dir, f"overfit_render_{tag}.pgm", files))
            rows.append(
                {
                    "fraction": f,
                    "grid": [gh, gw],
                    "gaussians": gh * gw,
                    "initial_psnr": trace[0].psnr,
                    "final_psnr": trace[-1].psnr,
                    "final_loss": trace[-1].loss,
                    "steps_to_within_1db": _reach(np.array([t.psnr for t in trace])),
                }
            )
        finals = [r["final_psnr"] for r in sorted(rows, key=lambda r: r["fraction"])]
        summary = {
            "best_psnr": max(finals),
            "sweep_non_decreasing": all(b >= a - 0.5 for a, b in zip(finals, finals[1:])),
        }
    params = {"image": os.path.basename(str(path)) if isinstance(path, (str, os.PathLike)) else "<array>", "steps": steps, "lr": lr,
              "fractions": list(fractions), "mu_lr_scale": mu_lr_scale, "std_px": OVERFIT_STD_PX, "xi_raw": OVERFIT_XI,
              "normalization": "unnormalized"}
    return ExperimentReport("overfit", params, rows, summary, files, _meta(timer, threads))


# --------------------------------------------------------------- noisy init

NOISY_FREEZE = ("mu", "sigma_x_raw", "sigma_y_raw", "rho_raw", "xi_raw")


def run_noisy_init(
    image=None,
    noise_levels: Sequence[float] = (0.1, 0.25, 0.5),
    draws: int = 4,
    steps: int = 2000,
    lr: float = 2e-3,
    factor: int = 2,
    seed: int = 0,
    out_dir: Optional[str] = None,
    threads: int = 1,
) -> ExperimentReport:
    """Noise robustness: LR-initialized amplitudes corrupted by Gaussian noise.

    One Gaussian per pixel of the ``factor``-times smaller LR image (default
    kernel, amplitudes divided by the kernel partition gain) is fitted to the
    full-resolution target, training the amplitudes only.  Each level averages
    ``draws`` noise draws; a clean run is the reference row.
    """
    if draws < 1 or steps < 1:
        raise InvalidParameterError("draws and steps must be >= 1")
    with _Timer() as timer:
        path = image if image is not None else bundled(OVERFIT_CROP)
        target = _image(path)
        if target.shape[0] == 3:
            target = to_luma(target)[None]
        lr_img = synthesize_lr(target, factor)
        _, lh, lw = lr_img.shape
        gain = kernel_gain(lh, lw, -2.0, -2.0, 0.0, 3.0)
        cfg = RenderConfig(out_width=target.shape[2], out_height=target.shape[1], normalization="unnormalized", threads=threads)
        rows, files = [], []
        for li, level in enumerate((0.0, *noise_levels)):
            reach, finals, losses = [], [], []
            for d in range(1 if level == 0.0 else draws):
                noise = np.random.default_rng([seed, li, d]).normal(0.0, level, lr_img.shape) if level else 0.0
                init = field_from_grid((lr_img + noise) / gain)
                _, trace = fit_field(target, init, cfg, steps, lr, freeze=NOISY_FREEZE)
                ps = np.array([t.psnr for t in trace])
                reach.append(_reach(ps))
                finals.append(ps[-1])
                losses.append(trace[-1].loss)
                if d == 0:
                    trace_path = _out_path(out_dir, f"noisy_trace_{level:g}.csv", files)
                    if trace_path:
                        write_trace_csv(trace, trace_path)
            rows.append(
                {
                    "noise": level,
                    "draws": len(reach),
                    "mean_steps_to_reach": float(np.mean(reach)),
                    "steps_to_reach": reach,
                    "final_psnr_min": min(finals),
                    "final_psnr_max": max(finals),
                    "final_psnr_mean": float(np.mean(finals)),
                    "final_loss_mean": float(np.mean(losses)),
                }
            )
        noisy = rows[1:]
        all_finals = [r[k] for r in noisy for k in ("final_psnr_min", "final_psnr_max")]
        clean_loss = rows[0]["final_loss_mean"]
        summary = {
            "final_psnr_spread": max(all_finals) - min(all_finals),
            "reach_monotone": all(b["mean_steps_to_reach"] >= a["mean_steps_to_reach"] for a, b in zip(noisy, noisy[1:])),
            "loss_within_5pct": all(abs(r["final_loss_mean"] - clean_loss) <= 0.05 * clean_loss for r in noisy),
        }
    params = {"image": os.path.basename(str(path)) if isinstance(path, (str, os.PathLike)) else "<array>", "noise_levels": list(noise_levels),
              "draws": draws, "steps": steps, "lr": lr, "factor": factor, "seed": seed, "trained": ["v"]}
    return ExperimentReport("noisy_init", params, rows, summary, files, _meta(timer, threads))


# --------------------------------------------------------------- scale suite


def _consistency_error(field: GaussianField, rendered: np.ndarray, cfg: RenderConfig, samples: int = 64) -> float:
    """Max deviation between rendered pixels and direct point queries at their centers."""
    _, h, w = rendered.shape
    xs, ys = grid_centers(h, w, cfg.canvas)
    idx = np.unique(np.linspace(0, h * w - 1, min(samples, h * w)).astype(int))
    iy, ix = np.divmod(idx, w)
    pts = np.stack([xs[ix], ys[iy]], axis=1)
    direct = render_points(field, pts, cfg)
    return float(np.max(np.abs(direct.T - rendered[:, iy, ix])))


def run_scale_suite(
    image=None,
    scales: Sequence[float] = (1.5, 2.4, 3.3, 3.6, 10.0),
    hr=None,
    fit_steps: int = 0,
    lr: float = 2e-3,
    out_dir: Optional[str] = None,
    threads: int = 1,
) -> ExperimentReport:
    """Render one LR-initialized field at every scale and check the outputs.

    The field has one Gaussian per LR pixel (default kernel, gain-compensated
    amplitudes), optionally fitted to the LR image for ``fit_steps``.  With
    ``hr`` given, rows also carry PSNR against it (and the bicubic baseline)
    wherever the rendered size matches.
    """
    with _Timer() as timer:
        lr_img = _image(image if image is not None else bundled(BUNDLED_CROPS[0]))
        c, h, w = lr_img.shape
        field = grid_init(lr_img, 1.035, 3.0)
        cfg = RenderConfig(out_width=w, out_height=h, normalization="unnormalized", clamp_output=True, threads=threads)
        if fit_steps:
            field, _ = fit_field(lr_img, field, cfg, fit_steps, lr, freeze=("mu",))
        hr_img = _image(hr) if hr is not None else None
        rows, files = [], []
        for s in scales:
            out = render_at_scale(field, s, h, w, cfg).data
            eh, ew = scaled_size(h, s), scaled_size(w, s)
            raw = rasterize(field, cfg.resized(eh, ew))
            row = {
                "scale": s,
                "height": out.shape[1],
                "width": out.shape[2],
                "expected_height": eh,
                "expected_width": ew,
                "finite": bool(np.all(np.isfinite(out))),
                "in_range": bool(out.min() >= 0.0 and out.max() <= 1.0),
                "consistency_error": _consistency_error(field, raw, cfg.resized(eh, ew)),
                "psnr": None,
                "bicubic_psnr": None,
            }
            if hr_img is not None and hr_img.shape == out.shape:
                row["psnr"] = psnr(out, hr_img)
                row["bicubic_psnr"] = psnr(np.clip(bicubic_resample(lr_img, eh, ew).data, 0, 1), hr_img)
            ext = {1: "pgm", 3: "ppm"}.get(c, "s2df")
            target = _out_path(out_dir, f"render_x{s:g}.{ext}", files)
            if target:
                (save_features if ext == "s2df" else save_image)(out, target)
            rows.append(row)
        summary = {
            "all_valid": all(
                r["finite"] and r["in_range"] and (r["height"], r["width"]) == (r["expected_height"], r["expected_width"]) for r in rows
            ),
            "max_consistency_error": max(r["consistency_error"] for r in rows) if rows else 0.0,
        }
    params = {"lr_shape": [c, h, w], "scales": list(scales), "fit_steps": fit_steps, "lr": lr, "hr": hr_img is not None}
    return ExperimentReport("scale_suite", params, rows, summary, files, _meta(timer, threads))


def bicubic_baseline(hr_images: Sequence, scales: Sequence[int] = (2, 3, 4), antialias: bool = True) -> dict:
    """Mean PSNR of bicubic upsampling of synthesized LR back to HR size, per scale.

    HR images are cropped to a multiple of the scale first (standard practice).
    """
    out = {}
    for s in scales:
        vals = []
        for img in hr_images:
            x = _image(img)
            x = x[:, : x.shape[1] - x.shape[1] % s, : x.shape[2] - x.shape[2] % s]
            lo = synthesize_lr(x, s, antialias)
            up = np.clip(bicubic_resample(lo, x.shape[1], x.shape[2]).data, 0.0, 1.0)
            vals.append(psnr(np.rint(up * 255) / 255, x))
        out[s] = float(np.mean(vals))
    return out


# ------------------------------------------------------------------ ablation

ABLATION_STEPS = 600
ABLATION_LR = 1e-3
# The logit map starts with logits of order 0.5, well below the Gumbel noise
# scale; a larger rate lets the selections become decisive within the budget.
ABLATION_LR_SCALE = {"logit_w": 10.0, "logit_b": 10.0}


def config_hash(cfg: PipelineConfig) -> str:
    return hashlib.sha256(canonical_json(cfg.__dict__)).hexdigest()[:16]


def _pairs(images: Sequence, scale: int):
    out = []
    for img in images:
        hr = _image(img)
        hr = hr[:, : hr.shape[1] - hr.shape[1] % (2 * scale), : hr.shape[2] - hr.shape[2] % (2 * scale)]
        out.append((synthesize_lr(hr, scale), hr))
    return out


def _hard_indices(model: PipelineModel, lr_img: np.ndarray) -> np.ndarray:
    cfg = model.cfg
    feats = model.lift_features(lr_img)
    unfolded = unfold(feats[cfg.channels_bicubic :], cfg.unfold_factor).data
    return select(model.logits(unfolded), model.bank, "hard").index


def _ablation_point(args) -> dict:
    cfg, images, names, scale, steps, lr, mode, seed, threads = args
    pairs = _pairs(images, scale)
    channels = {p[0].shape[0] for p in pairs}
    if len(channels) != 1:
        raise ShapeError("ablation images must share a channel count")
    model = PipelineModel.create(cfg, channels.pop(), seed)
    model, trace = fit_pipeline(model, pairs, steps, lr, mode=mode, seed=seed, threads=threads, lr_scale=ABLATION_LR_SCALE)
    scores = [psnr(upsample(lo, model=model, out_size=hi.shape[1:], threads=threads).data, hi) for lo, hi in pairs]
    row = {
        "channels_splat": cfg.channels_splat,
        "bank_size": cfg.bank_size,
        "config_hash": config_hash(cfg),
        "psnr": dict(zip(names, scores)),
        "mean_psnr": float(np.mean(scores)),
        "initial_train_psnr": trace[0].psnr,
        "final_train_psnr": trace[-1].psnr,
    }
    counts = None
    if cfg.channels_splat:
        idx = np.concatenate([_hard_indices(model, lo).ravel() for lo, _ in pairs])
        counts = selection_histogram(idx, cfg.bank_size)
        row["heavily_used"] = heavily_used(counts)
        row["used_entries"] = int(np.count_nonzero(counts))
    return {"row": row, "counts": counts, "bank": model.bank if cfg.channels_splat else None}


def run_ablation(
    grid: Sequence[dict] = ({"channels_splat": 0}, {"channels_splat": 8}),
    images: Optional[Sequence] = None,
    base: Optional[PipelineConfig] = None,
    scale: int = 2,
    steps: int = ABLATION_STEPS,
    lr: float = ABLATION_LR,
    mode: str = "st",
    seed: int = 0,
    workers: int = 1,
    out_dir: Optional[str] = None,
    threads: int = 1,
) -> ExperimentReport:
    """Fit the pipeline for each grid point on the images and compare hard-inference PSNR.

    LR inputs are synthesized at ``scale``; every grid point trains its own
    model from the same seed.  Rows are merged in config-hash order.
    """
    with _Timer() as timer:
        base = base or PipelineConfig()
        paths = list(images) if images is not None and len(images) else [bundled(n) for n in BUNDLED_CROPS]
        names = [os.path.basename(str(p)) if isinstance(p, (str, os.PathLike)) else f"image{i}" for i, p in enumerate(paths)]
        loaded = [_image(p) for p in paths]
        cfgs = [base.replace(scale=float(scale), **point) for point in grid]
        jobs = [(c, loaded, names, scale, steps, lr, mode, seed, threads) for c in cfgs]
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_ablation_point, jobs))
        else:
            results = [_ablation_point(j) for j in jobs]
        results.sort(key=lambda r: r["row"]["config_hash"])
        rows, files = [], []
        for res in results:
            row = res["row"]
            if res["counts"] is not None:
                tag = f"cs{row['channels_splat']}_k{row['bank_size']}"
                hist_path = _out_path(out_dir, f"hist_{tag}.csv", files)
                if hist_path:
                    write_histogram_csv(res["counts"], hist_path)
                    dump_bank(res["bank"], _out_path(out_dir, f"bank_{tag}.csv", files))
            rows.append(row)
        best = max(rows, key=lambda r: r["mean_psnr"])
        summary = {"best_config": {"channels_splat": best["channels_splat"], "bank_size": best["bank_size"]}}
    params = {"grid": [dict(p) for p in grid], "images": names, "scale": scale, "steps": steps, "lr": lr, "mode": mode,
              "seed": seed, "lr_scale": ABLATION_LR_SCALE, "base_config": copy.deepcopy(base.__dict__)}
    return ExperimentReport("ablation", params, rows, summary, files, _meta(timer, threads))


def run_bank_histogram(
    images: Optional[Sequence] = None,
    bank_size: int = 100,
    steps: int = ABLATION_STEPS,
    lr: float = ABLATION_LR,
    base: Optional[PipelineConfig] = None,
    scale: int = 2,
    seed: int = 0,
    out_dir: Optional[str] = None,
    threads: int = 1,
) -> ExperimentReport:
    """Fit the Gaussian-8 pipeline, then histogram hard selections per image and overall."""
    with _Timer() as timer:
        base = (base or PipelineConfig()).replace(bank_size=bank_size, scale=float(scale))
        if base.channels_splat == 0:
            raise InvalidParameterError("bank histogram needs channels_splat > 0")
        paths = list(images) if images is not None and len(images) else [bundled(n) for n in BUNDLED_CROPS]
        names = [os.path.basename(str(p)) for p in paths]
        pairs = _pairs([_image(p) for p in paths], scale)
        model = PipelineModel.create(base, pairs[0][0].shape[0], seed)
        if steps:
            model, _ = fit_pipeline(model, pairs, steps, lr, mode="st", seed=seed, threads=threads, lr_scale=ABLATION_LR_SCALE)
        rows, total = [], np.zeros(bank_size, dtype=np.int64)
        for name, (lo, _) in zip(names, pairs):
            counts = selection_histogram(_hard_indices(model, lo), bank_size)
            total += counts
            rows.append({"image": name, "pixels": int(counts.sum()), "heavily_used": heavily_used(counts)})
        files = []
        hist_path = _out_path(out_dir, "bank_hist.csv", files)
        if hist_path:
            write_histogram_csv(total, hist_path)
            dump_bank(model.bank, _out_path(out_dir, "bank.csv", files))
        summary = {
            "bank_size": bank_size,
            "pixels": int(total.sum()),
            "heavily_used": heavily_used(total),
            "used_entries": int(np.count_nonzero(total)),
            "top_share": float(np.sort(total)[::-1][:20].sum() / max(total.sum(), 1)),
        }
    params = {"images": names, "bank_size": bank_size, "steps": steps, "lr": lr, "scale": scale, "seed": seed,
              "heavily_used_share": 0.01}
    return ExperimentReport("bank_hist", params, rows, summary, files, _meta(timer, threads))
