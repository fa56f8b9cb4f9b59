# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled splatting kernels.  Same contract as ``_pykernels``; loops run without the GIL."""

from libc.math cimport exp

cdef double EXP_FLOOR = -30.0


def forward_tile(const double[:, ::1] mu, const double[:, ::1] icov, const double[::1] z,
                 const double[:, ::1] color, const double[::1] unit,
                 const double[::1] xs, const double[::1] ys, const Py_ssize_t[:, ::1] box,
                 const Py_ssize_t[::1] gidx, Py_ssize_t tx0, Py_ssize_t tx1,
                 Py_ssize_t ty0, Py_ssize_t ty1, double[:, :, ::1] out):
    cdef Py_ssize_t m, g, x, y, k, x0, x1, y0, y1
    cdef Py_ssize_t nk = color.shape[1]
    cdef double mx, my, a, b, c, zz, dx, dy, e, f
    cdef double ux = unit[0], uy = unit[1]
    with nogil:
        for m in range(gidx.shape[0]):
            g = gidx[m]
            x0 = box[g, 0] if box[g, 0] > tx0 else tx0
            x1 = box[g, 1] if box[g, 1] < tx1 else tx1
            y0 = box[g, 2] if box[g, 2] > ty0 else ty0
            y1 = box[g, 3] if box[g, 3] < ty1 else ty1
            if x1 <= x0 or y1 <= y0:
                continue
            mx = mu[g, 0]
            my = mu[g, 1]
            a = icov[g, 0]
            b = icov[g, 1]
            c = icov[g, 2]
            zz = z[g]
            for y in range(y0, y1):
                dy = (ys[y] - my) / uy
                for x in range(x0, x1):
                    dx = (xs[x] - mx) / ux
                    e = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
                    if e < EXP_FLOOR:
                        continue
                    f = zz * exp(e)
                    for k in range(nk):
                        out[k, y, x] += f * color[g, k]


def backward_range(const double[:, ::1] mu, const double[:, ::1] icov, const double[::1] z,
                   const double[:, ::1] color, const double[::1] unit,
                   const double[::1] xs, const double[::1] ys, const Py_ssize_t[:, ::1] box,
                   const double[:, :, ::1] grad, Py_ssize_t g0, Py_ssize_t g1,
                   double[:, ::1] acc):
    cdef Py_ssize_t g, x, y, k
    cdef Py_ssize_t nk = color.shape[1]
    cdef double mx, my, a, b, c, zz, dx, dy, e, f, h, hf
    cdef double t, sdx, sdy, mxx, mxy, myy
    cdef double ux = unit[0], uy = unit[1]
    with nogil:
        for g in range(g0, g1):
            for k in range(nk + 6):
                acc[g, k] = 0.0
            if box[g, 1] <= box[g, 0] or box[g, 3] <= box[g, 2]:
                continue
            mx = mu[g, 0]
            my = mu[g, 1]
            a = icov[g, 0]
            b = icov[g, 1]
            c = icov[g, 2]
            zz = z[g]
            t = 0.0
            sdx = 0.0
            sdy = 0.0
            mxx = 0.0
            mxy = 0.0
            myy = 0.0
            for y in range(box[g, 2], box[g, 3]):
                dy = (ys[y] - my) / uy
                for x in range(box[g, 0], box[g, 1]):
                    dx = (xs[x] - mx) / ux
                    e = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
                    if e < EXP_FLOOR:
                        continue
                    f = zz * exp(e)
                    h = 0.0
                    for k in range(nk):
                        acc[g, k] += f * grad[k, y, x]
                        h = h + grad[k, y, x] * color[g, k]
                    hf = h * f
                    t += hf
                    sdx += hf * (a * dx + b * dy)
                    sdy += hf * (b * dx + c * dy)
                    mxx += hf * dx * dx
                    mxy += hf * dx * dy
                    myy += hf * dy * dy
            acc[g, nk] = t
            acc[g, nk + 1] = sdx
            acc[g, nk + 2] = sdy
            acc[g, nk + 3] = mxx
            acc[g, nk + 4] = mxy
            acc[g, nk + 5] = myy
