"""Independent reference implementations used only by the tests.

Nothing here imports from the package's kernels: loops and scipy stand in
for the im2col path so that agreement means something.
"""
import itertools

import numpy as np
from scipy.signal import correlate2d


def naive_conv3d(x, w, b, stride=(1, 1), padding=(0, 0)):
    """Direct summation, one output element at a time."""
    n, c, l, h, wd = x.shape
    d, _, lk, kh, kw = w.shape
    ph, pw = padding
    sh, sw = stride
    xp = np.zeros((n, c, l, h + 2 * ph, wd + 2 * pw), dtype=np.float64)
    xp[:, :, :, ph:ph + h, pw:pw + wd] = x
    lo = l - lk + 1
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, d, lo, oh, ow))
    for ni, di, li, i, j in itertools.product(range(n), range(d), range(lo), range(oh), range(ow)):
        acc = 0.0 if b is None else float(b[di])
        for ci in range(c):
            for t in range(lk):
                for a in range(kh):
                    for bb in range(kw):
                        acc += w[di, ci, t, a, bb] * xp[ni, ci, li + t, i * sh + a, j * sw + bb]
        out[ni, di, li, i, j] = acc
    return out


def spatial_conv_same(frame, kern, dilation=1):
    """Zero-padded, size-preserving 2-D cross-correlation of (C, H, W) with (D, C, k, k)."""
    if dilation > 1:
        kern = inflate_kernel(kern, dilation)
    d = kern.shape[0]
    out = np.zeros((d,) + frame.shape[1:])
    for di in range(d):
        for ci in range(frame.shape[0]):
            out[di] += correlate2d(frame[ci].astype(np.float64), kern[di, ci].astype(np.float64), mode="same")
    return out


def retro_decomposition(x, w, b, dilation=1):
    """Retrospective conv as two spatial convolutions per historical frame."""
    n, c, L, h, wd = x.shape
    d = w.shape[0]
    out = np.zeros((n, d, L - 1, h, wd))
    for ni in range(n):
        cur = spatial_conv_same(x[ni, :, L - 1], w[:, :, 1], dilation)
        for l in range(L - 1):
            out[ni, :, l] = spatial_conv_same(x[ni, :, l], w[:, :, 0], dilation) + cur
            if b is not None:
                out[ni, :, l] += b[:, None, None]
    return out


def inflate_kernel(k, dilation):
    """Insert dilation-1 zeros between taps of the last two axes."""
    kh, kw = k.shape[-2:]
    big = np.zeros(k.shape[:-2] + ((kh - 1) * dilation + 1, (kw - 1) * dilation + 1), dtype=k.dtype)
    big[..., ::dilation, ::dilation] = k
    return big


def bilinear_point(img, y, x):
    """Bilinear sample of a 2-D array at continuous pixel-centre coordinates (clamped)."""
    h, w = img.shape
    y = min(max(y, 0.0), h - 1)
    x = min(max(x, 0.0), w - 1)
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    return ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
            + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])


def naive_resize(img, new_h, new_w):
    h, w = img.shape
    out = np.zeros((new_h, new_w))
    for i in range(new_h):
        for j in range(new_w):
            out[i, j] = bilinear_point(img, (i + 0.5) * h / new_h - 0.5, (j + 0.5) * w / new_w - 0.5)
    return out


def prf_by_hand(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def rasterize(shape, size, top, left, canvas):
    """Boolean footprint of one object, pixel by pixel."""
    h, w = canvas
    out = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            if shape == "rect":
                out[i, j] = top <= i < top + size and left <= j < left + size
            else:
                r = size / 2.0
                cy, cx = top + r - 0.5, left + r - 0.5
                out[i, j] = (i - cy) ** 2 + (j - cx) ** 2 <= r * r
    return out


def rel_err(actual, expected):
    """Max-norm relative error of ``actual`` against a reference array."""
    a = np.asarray(actual, dtype=np.float64)
    b = np.asarray(expected, dtype=np.float64)
    scale = max(float(np.max(np.abs(b))), 1e-30)
    return float(np.max(np.abs(a - b))) / scale
