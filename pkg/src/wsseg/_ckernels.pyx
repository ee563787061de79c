# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Signatures mirror :mod:`wsseg._pykernels`."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()


def rle_runs(const unsigned char[::1] flat):
    cdef Py_ssize_t n = flat.shape[0]
    cdef Py_ssize_t i, start = -1, count = 0
    out = np.empty((n // 2 + 1, 2), dtype=np.int64)
    cdef long long[:, ::1] runs = out
    for i in range(n):
        if flat[i]:
            if start < 0:
                start = i
        elif start >= 0:
            runs[count, 0] = start
            runs[count, 1] = i - start
            count += 1
            start = -1
    if start >= 0:
        runs[count, 0] = start
        runs[count, 1] = n - start
        count += 1
    return out[:count]


def rle_fill(const long long[:, ::1] runs, Py_ssize_t n):
    out = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] flat = out
    cdef Py_ssize_t r, i, start, stop
    for r in range(runs.shape[0]):
        start = runs[r, 0]
        stop = start + runs[r, 1]
        for i in range(start, stop):
            flat[i] = 1
    return out


def confusion(const long long[::1] gt, const long long[::1] pred, Py_ssize_t k, long long ignore):
    out = np.zeros((k, k), dtype=np.int64)
    cdef long long[:, ::1] cm = out
    cdef Py_ssize_t i
    for i in range(gt.shape[0]):
        if gt[i] == ignore:
            continue
        cm[gt[i], pred[i]] += 1
    return out


def crf_kernel_matrix(const double[:, ::1] pos, const double[:, ::1] feat, double w_g, double w_b):
    cdef Py_ssize_t n = pos.shape[0], dp = pos.shape[1], df = feat.shape[1]
    cdef Py_ssize_t i, j, c
    cdef double dg, db, t, v
    out = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] K = out
    for i in range(n):
        for j in range(i + 1, n):
            dg = 0.0
            for c in range(dp):
                t = pos[i, c] - pos[j, c]
                dg += t * t
            db = 0.0
            for c in range(df):
                t = feat[i, c] - feat[j, c]
                db += t * t
            v = 0.0
            if w_g != 0.0:
                v += w_g * exp(-0.5 * dg)
            if w_b != 0.0:
                v += w_b * exp(-0.5 * db)
            K[i, j] = v
            K[j, i] = v
    return out


def crf_message(const double[:, ::1] pos, const double[:, ::1] feat, const double[:, ::1] q,
                double w_g, double w_b):
    cdef Py_ssize_t n = pos.shape[0], dp = pos.shape[1], df = feat.shape[1], L = q.shape[0]
    cdef Py_ssize_t i, j, c, l
    cdef double dg, db, t, v
    out = np.zeros((L, n), dtype=np.float64)
    cdef double[:, ::1] m = out
    for i in range(n):
        for j in range(i + 1, n):
            dg = 0.0
            for c in range(dp):
                t = pos[i, c] - pos[j, c]
                dg += t * t
            db = 0.0
            for c in range(df):
                t = feat[i, c] - feat[j, c]
                db += t * t
            v = 0.0
            if w_g != 0.0:
                v += w_g * exp(-0.5 * dg)
            if w_b != 0.0:
                v += w_b * exp(-0.5 * db)
            for l in range(L):
                m[l, i] += v * q[l, j]
                m[l, j] += v * q[l, i]
    return out


def path_max(const double[:, ::1] boundary, const long long[:, :, ::1] paths):
    """Max boundary along each offset path; +inf where the endpoint leaves the grid."""
    cdef Py_ssize_t H = boundary.shape[0], W = boundary.shape[1]
    cdef Py_ssize_t P = paths.shape[0], T = paths.shape[1]
    cdef Py_ssize_t p, y, x, t, yy, xx, ey, ex
    cdef double mx, v
    out = np.empty((P, H, W), dtype=np.float64)
    cdef double[:, :, ::1] res = out
    for p in range(P):
        ey = paths[p, T - 1, 0]
        ex = paths[p, T - 1, 1]
        for y in range(H):
            for x in range(W):
                if y + ey < 0 or y + ey >= H or x + ex < 0 or x + ex >= W:
                    res[p, y, x] = INFINITY
                    continue
                mx = boundary[y, x]
                for t in range(T):
                    yy = y + paths[p, t, 0]
                    xx = x + paths[p, t, 1]
                    v = boundary[yy, xx]
                    if v > mx:
                        mx = v
                res[p, y, x] = mx
    return out


def crf_kernel_grid(const long long[:, ::1] colour, Py_ssize_t h, Py_ssize_t w,
                    const double[::1] tg_y, const double[::1] tg_x,
                    const double[::1] tb_y, const double[::1] tb_x,
                    const double[::1] tc, double w_g, double w_b):
    """float32 crf_kernel_matrix for pixels on an integer grid with integer colours.

    Every Gaussian factor is a table lookup indexed by |difference|; per row
    the x and single-channel colour factors are re-indexed so the inner loop
    is two loads and a multiply-add.
    """
    cdef Py_ssize_t n = h * w, nc = colour.shape[1], nt = tc.shape[0]
    cdef Py_ssize_t i, j, c, y1, x1, y2, x2, d, v
    cdef double gy, by, b
    out = np.empty((n, n), dtype=np.float32)
    cdef float[:, ::1] K = out
    rx_b = np.empty(w)
    rx_g = np.empty(w)
    rc = np.empty(nt)
    cdef double[::1] bx = rx_b, gx = rx_g, cr = rc
    for i in range(n):
        y1 = i // w
        x1 = i - y1 * w
        for x2 in range(w):
            d = x1 - x2 if x1 >= x2 else x2 - x1
            bx[x2] = w_b * tb_x[d]
            gx[x2] = w_g * tg_x[d]
        if nc == 1:
            for v in range(nt):
                d = colour[i, 0] - v if colour[i, 0] >= v else v - colour[i, 0]
                cr[v] = tc[d] if d < nt else 0.0
        j = 0
        for y2 in range(h):
            d = y1 - y2 if y1 >= y2 else y2 - y1
            gy = tg_y[d]
            by = tb_y[d]
            for x2 in range(w):
                if nc == 1:
                    b = by * bx[x2] * cr[colour[j, 0]]
                else:
                    b = by * bx[x2]
                    for c in range(nc):
                        d = colour[i, c] - colour[j, c]
                        if d < 0:
                            d = -d
                        b *= tc[d]
                b += gy * gx[x2]
                # below float32's normal range: store 0 (subnormals stall the products)
                K[i, j] = <float>b if b > 1e-30 else 0.0
                j += 1
        K[i, i] = 0.0
    return out
