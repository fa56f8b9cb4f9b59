"""Pure NumPy splatting kernels (fallback when the compiled extension is absent).

Shared contract with ``_ckernels.pyx``:

* ``mu`` (N, 2), ``icov`` (N, 3) holding inverse-covariance entries
  ``(xx, xy, yy)`` in local units, ``z`` (N,) prefactors, ``color`` (N, K),
  ``unit`` (2,), pixel-center vectors ``xs`` (W,) and ``ys`` (H,), and
  ``box`` (N, 4) half-open pixel ranges ``[x0, x1) x [y0, y1)``.
* For every pixel, contributions are added in ascending Gaussian index, so
  results do not depend on how the canvas is split into tiles.
"""

import numpy as np

EXP_FLOOR = -30.0
_CHUNK_ELEMS = 1 << 21


def forward_tile(mu, icov, z, color, unit, xs, ys, box, gidx, tx0, tx1, ty0, ty1, out):
    if len(gidx) == 0:
        return
    gidx = np.asarray(gidx)
    b = box[gidx]
    x0 = np.maximum(b[:, 0], tx0)
    x1 = np.minimum(b[:, 1], tx1)
    y0 = np.maximum(b[:, 2], ty0)
    y1 = np.minimum(b[:, 3], ty1)
    keep = (x1 > x0) & (y1 > y0)
    if not np.any(keep):
        return
    gidx, x0, x1, y0, y1 = gidx[keep], x0[keep], x1[keep], y0[keep], y1[keep]
    bw = int((x1 - x0).max())
    bh = int((y1 - y0).max())
    tw, th = tx1 - tx0, ty1 - ty0
    kch = color.shape[1]
    step = max(1, _CHUNK_ELEMS // max(1, bw * bh * kch))
    acc = np.zeros((kch, th * tw))
    for s in range(0, len(gidx), step):
        sl = slice(s, s + step)
        g = gidx[sl]
        ix = x0[sl, None, None] + np.arange(bw)[None, None, :]
        iy = y0[sl, None, None] + np.arange(bh)[None, :, None]
        valid = (ix < x1[sl, None, None]) & (iy < y1[sl, None, None])
        ixc = np.minimum(ix, len(xs) - 1)
        iyc = np.minimum(iy, len(ys) - 1)
        dx = (xs[ixc] - mu[g, 0][:, None, None]) / unit[0]
        dy = (ys[iyc] - mu[g, 1][:, None, None]) / unit[1]
        a = icov[g, 0][:, None, None]
        bxy = icov[g, 1][:, None, None]
        c = icov[g, 2][:, None, None]
        e = -0.5 * (a * dx * dx + 2.0 * bxy * dx * dy + c * dy * dy)
        valid &= e >= EXP_FLOOR
        f = z[g][:, None, None] * np.exp(np.where(valid, e, 0.0))
        flat = ((iy - ty0) * tw + (ix - tx0))[valid]
        fv = np.broadcast_to(f, valid.shape)[valid]
        owner = np.broadcast_to(np.arange(len(g))[:, None, None], valid.shape)[valid]
        col = color[g][owner]
        for k in range(kch):
            acc[k] += np.bincount(flat, weights=fv * col[:, k], minlength=th * tw)
    out[:, ty0:ty1, tx0:tx1] += acc.reshape(kch, th, tw)


def backward_range(mu, icov, z, color, unit, xs, ys, box, grad, g0, g1, acc):
    """Per-Gaussian reductions for the backward pass.

    Row ``g`` of ``acc`` receives ``[G_0..G_{K-1}, T, Sdx, Sdy, Mxx, Mxy, Myy]``
    where, with ``h = sum_k grad_k * color_k`` and ``f`` the density,
    ``G_k = sum f grad_k``, ``T = sum h f``, ``Sdx = sum h f (xx dx + xy dy)``,
    ``Sdy = sum h f (xy dx + yy dy)`` and ``M = sum h f d d^T``.
    """
    kch = color.shape[1]
    b = box[g0:g1]
    w = b[:, 1] - b[:, 0]
    hgt = b[:, 3] - b[:, 2]
    nonempty = (w > 0) & (hgt > 0)
    gids = np.arange(g0, g1)[nonempty]
    acc[g0:g1] = 0.0
    if len(gids) == 0:
        return
    bw = int(w[nonempty].max())
    bh = int(hgt[nonempty].max())
    step = max(1, _CHUNK_ELEMS // max(1, bw * bh * (kch + 1)))
    for s in range(0, len(gids), step):
        g = gids[s : s + step]
        bb = box[g]
        ix = bb[:, 0, None, None] + np.arange(bw)[None, None, :]
        iy = bb[:, 2, None, None] + np.arange(bh)[None, :, None]
        valid = (ix < bb[:, 1, None, None]) & (iy < bb[:, 3, None, None])
        ixc = np.minimum(ix, len(xs) - 1)
        iyc = np.minimum(iy, len(ys) - 1)
        dx = (xs[ixc] - mu[g, 0][:, None, None]) / unit[0]
        dy = (ys[iyc] - mu[g, 1][:, None, None]) / unit[1]
        a = icov[g, 0][:, None, None]
        bxy = icov[g, 1][:, None, None]
        c = icov[g, 2][:, None, None]
        e = -0.5 * (a * dx * dx + 2.0 * bxy * dx * dy + c * dy * dy)
        valid &= e >= EXP_FLOOR
        f = np.where(valid, z[g][:, None, None] * np.exp(np.where(valid, e, 0.0)), 0.0)
        gr = grad[:, iyc, ixc]  # (K, M, bh, bw)
        G = np.einsum("mhw,kmhw->mk", f, gr)
        h = np.einsum("kmhw,mk->mhw", gr, color[g])
        hf = h * f
        T = hf.sum(axis=(1, 2))
        sdx = (hf * (a * dx + bxy * dy)).sum(axis=(1, 2))
        sdy = (hf * (bxy * dx + c * dy)).sum(axis=(1, 2))
        mxx = (hf * dx * dx).sum(axis=(1, 2))
        mxy = (hf * dx * dy).sum(axis=(1, 2))
        myy = (hf * dy * dy).sum(axis=(1, 2))
        acc[g, :kch] = G
        acc[g, kch:] = np.stack([T, sdx, sdy, mxx, mxy, myy], axis=1)
