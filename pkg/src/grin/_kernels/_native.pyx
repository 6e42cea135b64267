# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot kernels (see _pykernels for contracts)."""
import numpy as np

cimport numpy as cnp
from libc.math cimport floor, sqrt

cnp.import_array()


def warp_bilinear(src, inv, int out_h, int out_w):
    cdef cnp.ndarray[cnp.float64_t, ndim=3] s = np.ascontiguousarray(src, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] m = np.ascontiguousarray(inv, dtype=np.float64)
    cdef int h = s.shape[0], w = s.shape[1], c = s.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] out = np.zeros((out_h, out_w, c), dtype=np.float64)
    cdef double m00 = m[0, 0], m01 = m[0, 1], m02 = m[0, 2]
    cdef double m10 = m[1, 0], m11 = m[1, 1], m12 = m[1, 2]
    cdef double m20 = m[2, 0], m21 = m[2, 1], m22 = m[2, 2]
    cdef int x, y, k, x0, y0
    cdef double denom, sx, sy, fx, fy, w00, w01, w10, w11
    cdef bint in00, in01, in10, in11
    for y in range(out_h):
        for x in range(out_w):
            denom = m20 * x + m21 * y + m22
            if denom < 1e-12 and denom > -1e-12:
                continue
            sx = (m00 * x + m01 * y + m02) / denom
            sy = (m10 * x + m11 * y + m12) / denom
            x0 = <int>floor(sx)
            y0 = <int>floor(sy)
            fx = sx - x0
            fy = sy - y0
            w00 = (1.0 - fx) * (1.0 - fy)
            w01 = fx * (1.0 - fy)
            w10 = (1.0 - fx) * fy
            w11 = fx * fy
            in00 = 0 <= x0 < w and 0 <= y0 < h
            in01 = 0 <= x0 + 1 < w and 0 <= y0 < h
            in10 = 0 <= x0 < w and 0 <= y0 + 1 < h
            in11 = 0 <= x0 + 1 < w and 0 <= y0 + 1 < h
            if not (in00 or in01 or in10 or in11):
                continue
            for k in range(c):
                out[y, x, k] = (
                    (s[y0, x0, k] * w00 if in00 else 0.0)
                    + (s[y0, x0 + 1, k] * w01 if in01 else 0.0)
                    + (s[y0 + 1, x0, k] * w10 if in10 else 0.0)
                    + (s[y0 + 1, x0 + 1, k] * w11 if in11 else 0.0)
                )
    return out


def harris_response(img, double k, int window_radius):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] im = np.ascontiguousarray(img, dtype=np.float64)
    cdef int h = im.shape[0], w = im.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gx = np.zeros((h, w), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gy = np.zeros((h, w), dtype=np.float64)
    cdef int y, x, dy, dx, yy, xx
    cdef double vpp, vpn, vnp_, vnn, vp0, vn0, v0p, v0n

    # Sobel with zero padding
    for y in range(h):
        for x in range(w):
            vpp = im[y - 1, x - 1] if y > 0 and x > 0 else 0.0
            vpn = im[y - 1, x + 1] if y > 0 and x < w - 1 else 0.0
            vnp_ = im[y + 1, x - 1] if y < h - 1 and x > 0 else 0.0
            vnn = im[y + 1, x + 1] if y < h - 1 and x < w - 1 else 0.0
            vp0 = im[y - 1, x] if y > 0 else 0.0
            vn0 = im[y + 1, x] if y < h - 1 else 0.0
            v0p = im[y, x - 1] if x > 0 else 0.0
            v0n = im[y, x + 1] if x < w - 1 else 0.0
            gx[y, x] = (vpn - vpp) + 2.0 * (v0n - v0p) + (vnn - vnp_)
            gy[y, x] = (vnp_ - vpp) + 2.0 * (vn0 - vp0) + (vnn - vpn)

    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((h, w), dtype=np.float64)
    cdef double sxx, syy, sxy, gxv, gyv
    cdef int r = window_radius
    for y in range(h):
        for x in range(w):
            sxx = 0.0
            syy = 0.0
            sxy = 0.0
            for dy in range(-r, r + 1):
                yy = y + dy
                if yy < 0 or yy >= h:
                    continue
                for dx in range(-r, r + 1):
                    xx = x + dx
                    if xx < 0 or xx >= w:
                        continue
                    gxv = gx[yy, xx]
                    gyv = gy[yy, xx]
                    sxx += gxv * gxv
                    syy += gyv * gyv
                    sxy += gxv * gyv
            out[y, x] = sxx * syy - sxy * sxy - k * (sxx + syy) * (sxx + syy)
    return out


def pairwise_sqdist(a, b):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] aa = np.ascontiguousarray(a, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] bb = np.ascontiguousarray(b, dtype=np.float64)
    cdef int n = aa.shape[0], m = bb.shape[0], d = aa.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n, m), dtype=np.float64)
    cdef int i, j, t
    cdef double acc, diff
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(d):
                diff = aa[i, t] - bb[j, t]
                acc += diff * diff
            out[i, j] = acc
    return out


def min_cross_dist(a, b):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] aa = np.ascontiguousarray(a, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] bb = np.ascontiguousarray(b, dtype=np.float64)
    cdef int n = aa.shape[0], m = bb.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef int i, j
    cdef double best, dx, dy, d2
    for i in range(n):
        best = -1.0
        for j in range(m):
            dx = aa[i, 0] - bb[j, 0]
            dy = aa[i, 1] - bb[j, 1]
            d2 = dx * dx + dy * dy
            if best < 0.0 or d2 < best:
                best = d2
        out[i] = sqrt(best) if best >= 0.0 else 0.0
    return out
