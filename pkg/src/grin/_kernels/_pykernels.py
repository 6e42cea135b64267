"""NumPy implementations of the hot kernels.

Fallback used when the compiled extension is unavailable; also the
reference the native kernels are checked against.
"""
import numpy as np


def warp_bilinear(src, inv, out_h, out_w):
    """Resample `src` (H,W,C) through the output->source map `inv` (3x3).

    Each output pixel (x, y) is sampled at inv @ (x, y, 1) with bilinear
    interpolation; neighbours outside the source extent contribute zero.
    """
    src = np.ascontiguousarray(src, dtype=np.float64)
    h, w, c = src.shape
    xs = np.arange(out_w, dtype=np.float64)
    ys = np.arange(out_h, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    denom = inv[2, 0] * gx + inv[2, 1] * gy + inv[2, 2]
    denom = np.where(np.abs(denom) < 1e-12, np.nan, denom)
    sx = (inv[0, 0] * gx + inv[0, 1] * gy + inv[0, 2]) / denom
    sy = (inv[1, 0] * gx + inv[1, 1] * gy + inv[1, 2]) / denom

    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0

    out = np.zeros((out_h, out_w, c), dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & np.isfinite(wgt)
            xi_c = np.where(valid, xi, 0).astype(np.intp)
            yi_c = np.where(valid, yi, 0).astype(np.intp)
            vals = src[yi_c, xi_c, :] * np.where(valid, wgt, 0.0)[..., None]
            out += vals
    return out


def _sobel(img):
    p = np.pad(img, 1)
    gx = (
        (p[:-2, 2:] - p[:-2, :-2])
        + 2.0 * (p[1:-1, 2:] - p[1:-1, :-2])
        + (p[2:, 2:] - p[2:, :-2])
    )
    gy = (
        (p[2:, :-2] - p[:-2, :-2])
        + 2.0 * (p[2:, 1:-1] - p[:-2, 1:-1])
        + (p[2:, 2:] - p[:-2, 2:])
    )
    return gx, gy


def _box_sum(a, r):
    """Sum over a (2r+1)^2 window, zero padding outside."""
    size = 2 * r + 1
    h, w = a.shape
    p = np.zeros((h + size - 1, w + size - 1), dtype=np.float64)
    p[r : r + h, r : r + w] = a
    ii = np.zeros((p.shape[0] + 1, p.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(p, axis=0), axis=1, out=ii[1:, 1:])
    return ii[size:, size:] - ii[:-size, size:] - ii[size:, :-size] + ii[:-size, :-size]


def harris_response(img, k, window_radius):
    """Harris corner response with Sobel gradients and a box window."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    gx, gy = _sobel(img)
    sxx = _box_sum(gx * gx, window_radius)
    syy = _box_sum(gy * gy, window_radius)
    sxy = _box_sum(gx * gy, window_radius)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def pairwise_sqdist(a, b):
    """Squared Euclidean distances between row vectors of a (N,D) and b (M,D)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    a2 = np.einsum("ij,ij->i", a, a)
    b2 = np.einsum("ij,ij->i", b, b)
    d = a2[:, None] + b2[None, :] - 2.0 * (a @ b.T)
    np.maximum(d, 0.0, out=d)
    return d


def min_cross_dist(a, b, chunk=512):
    """Min Euclidean distance from each point of a (N,2) to the set b (M,2)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    out = np.empty(a.shape[0], dtype=np.float64)
    for i in range(0, a.shape[0], chunk):
        blk = a[i : i + chunk]
        d2 = (blk[:, None, 0] - b[None, :, 0]) ** 2 + (blk[:, None, 1] - b[None, :, 1]) ** 2
        out[i : i + chunk] = d2.min(axis=1)
    return np.sqrt(out)
