"""Independent oracles and random generators shared by the tests."""

import math

import numpy as np

from splat2d.gauss import EPS_PSD, GaussianField


def random_field(rng, n, k=2, margin=0.1, unit=None, scale_range=(-3.0, 1.0)):
    """Random field with centers in ``[margin, 1 - margin]^2``."""
    return GaussianField(
        mu=rng.uniform(margin, 1 - margin, (n, 2)),
        sigma_x_raw=rng.uniform(*scale_range, n),
        sigma_y_raw=rng.uniform(*scale_range, n),
        rho_raw=rng.uniform(-2, 2, n),
        xi_raw=rng.uniform(-2, 2, n),
        v=rng.uniform(-1, 1, (n, k)),
        unit=unit if unit is not None else (rng.uniform(0.05, 0.3),) * 2,
    )


def dense_oracle(field, xs, ys, det_power=1.0):
    """Vectorized density, activation and sum with an explicit 2x2 inverse and no truncation at all.

    Written independently of the package renderers (no exponent floor, no
    support boxes); returns ``(K, len(ys), len(xs))``.
    """
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))  # noqa: E731
    sxx, syy = sig(field.sigma_x_raw), sig(field.sigma_y_raw)
    sxy = np.tanh(field.rho_raw) * np.sqrt(sxx * syy) * (1 - EPS_PSD)
    det = sxx * syy - sxy**2
    z = 1.0 if det_power == 0 else 1.0 / (2 * math.pi * det**det_power)
    px, py = np.meshgrid(xs, ys)
    dx = (px[None] - field.mu[:, 0, None, None]) / field.unit[0]
    dy = (py[None] - field.mu[:, 1, None, None]) / field.unit[1]
    q = (syy[:, None, None] * dx * dx - 2 * sxy[:, None, None] * dx * dy + sxx[:, None, None] * dy * dy) / det[:, None, None]
    dens = (z if np.isscalar(z) else z[:, None, None]) * np.exp(-0.5 * q)
    color = sig(field.xi_raw)[:, None] * field.v
    return np.einsum("nyx,nk->kyx", dens, color)


def centers(n):
    return (np.arange(n) + 0.5) / n


def cubic(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t < 2:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


def resize_1d_ref(x, n_out, antialias=False):
    """Scalar-loop cubic convolution: half-pixel centers, clamped edges."""
    n_in = len(x)
    ratio = n_in / n_out
    stretch = ratio if antialias and ratio > 1 else 1.0
    out = []
    for j in range(n_out):
        src = (j + 0.5) * ratio - 0.5
        acc = wsum = 0.0
        for k in range(math.floor(src) - 3 * math.ceil(stretch), math.floor(src) + 3 * math.ceil(stretch) + 1):
            w = cubic((src - k) / stretch)
            acc += w * x[min(max(k, 0), n_in - 1)]
            wsum += w
        out.append(acc / wsum if stretch != 1.0 else acc)
    return np.array(out)


def resize_ref(img, out_h, out_w, antialias=False):
    c, h, w = img.shape
    tmp = np.array([[resize_1d_ref(img[ch, i], out_w, antialias) for i in range(h)] for ch in range(c)])
    return np.array([[resize_1d_ref(tmp[ch, :, j], out_h, antialias) for j in range(out_w)] for ch in range(c)]).transpose(0, 2, 1)


def fd_check(f, x, analytic, h=1e-5, rel=1e-4, abs_floor=1e-7):
    """Central finite differences of scalar ``f`` at array ``x``; returns the worst violation ratio."""
    x = np.array(x, dtype=np.float64)
    worst = 0.0
    flat = x.reshape(-1)
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        num = (fp - fm) / (2 * h)
        tol = max(rel * max(abs(num), abs(a[i])), abs_floor)
        worst = max(worst, abs(num - a[i]) / tol)
    return worst
