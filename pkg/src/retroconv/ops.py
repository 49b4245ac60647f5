"""Spatio-temporal operators: forward kernels and their exact adjoints.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(grad_out, cache)``. The convenience wrappers at the bottom
(``conv3d``, ``retro_conv`` ...) run forward only and take kernel objects.

Convolutions are computed as im2col + one GEMM. All arithmetic stays in the
input dtype so the same code serves float32 training and float64 checking.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ShapeError, TemporalLengthError
from .tensor import check_tensor5, concat_channels


# --- im2col machinery ----------------------------------------------------

def _out_size(n, k, pad, stride, dil):
    return (n + 2 * pad - dil * (k - 1) - 1) // stride + 1


def _im2col(xp, lk, kh, kw, lo, oh, ow, stride, dil):
    """Gather patches of a padded (N, C, L, H, W) array into (C, lk, kh, kw, N, lo, oh, ow)."""
    n, c = xp.shape[:2]
    sh, sw = stride
    cols = np.empty((c, lk, kh, kw, n, lo, oh, ow), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3, 4)
    for t in range(lk):
        for a in range(kh):
            r0 = a * dil
            for b in range(kw):
                c0 = b * dil
                cols[:, t, a, b] = xt[:, :, t:t + lo, r0:r0 + sh * (oh - 1) + 1:sh, c0:c0 + sw * (ow - 1) + 1:sw]
    return cols


def _col2im(gcols, padded_shape, stride, dil):
    c, lk, kh, kw, n, lo, oh, ow = gcols.shape
    sh, sw = stride
    _, _, lp, hp, wp = padded_shape
    gxt = np.zeros((c, n, lp, hp, wp), dtype=gcols.dtype)
    for t in range(lk):
        for a in range(kh):
            r0 = a * dil
            for b in range(kw):
                c0 = b * dil
                gxt[:, :, t:t + lo, r0:r0 + sh * (oh - 1) + 1:sh, c0:c0 + sw * (ow - 1) + 1:sw] += gcols[:, t, a, b]
    return gxt.transpose(1, 0, 2, 3, 4)


def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


# --- conv3d --------------------------------------------------------------

def conv3d_forward(x, w, b=None, stride=(1, 1), padding=(0, 0), dilation=1, t_pad=0):
    """Temporal-valid (optionally zero-padded by ``t_pad``), spatially padded 3D convolution.

    ``w`` has shape (D, C, lk, kh, kw); output is (N, D, L + 2*t_pad - lk + 1, oh, ow).
    """
    check_tensor5(x, "x")
    if w.ndim != 5:
        raise ShapeError(f"conv3d weight must be (D, C, lk, kh, kw), got {w.shape}")
    n, c, l, h, wd = x.shape
    d, wc, lk, kh, kw = w.shape
    if wc != c:
        raise ShapeError(f"channel mismatch: input has {c}, kernel expects {wc}")
    stride, padding = _pair(stride), _pair(padding)
    lo = l + 2 * t_pad - lk + 1
    if lo < 1:
        raise TemporalLengthError(f"temporal kernel {lk} longer than input length {l} (t_pad={t_pad})")
    oh = _out_size(h, kh, padding[0], stride[0], dilation)
    ow = _out_size(wd, kw, padding[1], stride[1], dilation)
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} (dilation {dilation}) does not fit input {h}x{wd}")
    ph, pw = padding
    if ph or pw or t_pad:
        xp = np.pad(x, ((0, 0), (0, 0), (t_pad, t_pad), (ph, ph), (pw, pw)))
    else:
        xp = x
    cols = _im2col(xp, lk, kh, kw, lo, oh, ow, stride, dilation)
    k = c * lk * kh * kw
    out = (w.reshape(d, k) @ cols.reshape(k, -1)).reshape(d, n, lo, oh, ow)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))
    if b is not None:
        out += b.reshape(1, d, 1, 1, 1)
    cache = (cols, w, xp.shape, x.shape, stride, padding, dilation, t_pad, b is not None)
    return out, cache


def conv3d_backward(gout, cache):
    cols, w, padded_shape, in_shape, stride, padding, dilation, t_pad, has_bias = cache
    d = w.shape[0]
    k = cols.shape[0] * cols.shape[1] * cols.shape[2] * cols.shape[3]
    g2 = gout.transpose(1, 0, 2, 3, 4).reshape(d, -1)
    # (K, M) @ (M, D) is the faster BLAS orientation here
    gw = (cols.reshape(k, -1) @ g2.T).T.reshape(w.shape)
    gcols = (w.reshape(d, k).T @ g2).reshape(cols.shape)
    gxp = _col2im(gcols, padded_shape, stride, dilation)
    _, _, l, h, wd = in_shape
    ph, pw = padding
    gx = np.ascontiguousarray(gxp[:, :, t_pad:t_pad + l, ph:ph + h, pw:pw + wd])
    gb = gout.sum(axis=(0, 2, 3, 4)) if has_bias else None
    return gx, gw, gb


# --- retrospective convolution ------------------------------------------

def same_padding(k: int, dilation: int = 1) -> int:
    if k % 2 == 0:
        raise ShapeError(f"size-preserving padding needs an odd kernel, got {k}")
    return dilation * (k - 1) // 2


def effective_fov(k: int, dilation: int) -> int:
    """Spatial extent covered by a dilated kernel of size ``k``."""
    return k + (k - 1) * (dilation - 1)


def retro_forward(x, w, b=None, dilation=1):
    """Retrospective convolution (no activation).

    ``w`` is (D, C, 2, kh, kw): ``w[:, :, 0]`` sees historical frame l,
    ``w[:, :, 1]`` sees the current (last) frame. Output has L-1 slices.
    """
    check_tensor5(x, "x")
    if w.ndim != 5 or w.shape[2] != 2:
        raise ShapeError(f"retrospective kernel must be (D, C, 2, kh, kw), got {w.shape}")
    if dilation < 1:
        raise ConfigError(f"dilation must be >= 1, got {dilation}")
    L = x.shape[2]
    if L < 2:
        raise TemporalLengthError(f"retrospective convolution needs L >= 2, got L={L}")
    pad = (same_padding(w.shape[3], dilation), same_padding(w.shape[4], dilation))
    hist, hcache = conv3d_forward(x[:, :, :L - 1], w[:, :, 0:1], None, padding=pad, dilation=dilation)
    cur, ccache = conv3d_forward(x[:, :, L - 1:], w[:, :, 1:2], None, padding=pad, dilation=dilation)
    out = hist + cur
    if b is not None:
        out += b.reshape(1, -1, 1, 1, 1)
    return out, (hcache, ccache, x.shape, b is not None)


def retro_backward(gout, cache):
    hcache, ccache, in_shape, has_bias = cache
    L = in_shape[2]
    gx_hist, gw0, _ = conv3d_backward(gout, hcache)
    # the current frame feeds every output slice
    gx_cur, gw1, _ = conv3d_backward(gout.sum(axis=2, keepdims=True), ccache)
    gx = np.empty(in_shape, dtype=gout.dtype)
    gx[:, :, :L - 1] = gx_hist
    gx[:, :, L - 1:] = gx_cur
    gw = np.concatenate([gw0, gw1], axis=2)
    gb = gout.sum(axis=(0, 2, 3, 4)) if has_bias else None
    return gx, gw, gb


# --- pooling, deconvolution, pointwise ----------------------------------

def temporal_avg_pool_forward(x):
    check_tensor5(x, "x")
    return x.mean(axis=2, keepdims=True), x.shape


def temporal_avg_pool_backward(gout, in_shape):
    return np.broadcast_to(gout / in_shape[2], in_shape).copy()


def maxpool2_forward(x):
    check_tensor5(x, "x")
    n, c, l, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(n, c, l, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 3, 5, 4, 6).reshape(n, c, l, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)  # first maximum wins ties
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(gout, cache):
    idx, (n, c, l, h, w) = cache
    g4 = np.zeros(gout.shape + (4,), dtype=gout.dtype)
    np.put_along_axis(g4, idx[..., None], gout[..., None], axis=-1)
    return g4.reshape(n, c, l, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 3, 5, 4, 6).reshape(n, c, l, h, w)


def deconv2x2_forward(x, w, b=None):
    """2x2 transposed convolution with stride 2; ``w`` is (D, C, 2, 2)."""
    check_tensor5(x, "x")
    n, c, l, h, wd = x.shape
    if l != 1:
        raise ShapeError(f"deconv2x2 expects a single time slice, got l={l}")
    if w.ndim != 4 or w.shape[1] != c or w.shape[2:] != (2, 2):
        raise ShapeError(f"deconv weight must be (D, {c}, 2, 2), got {w.shape}")
    d = w.shape[0]
    # (N, H, W, D, 2, 2) -> (N, D, H, 2, W, 2)
    out = np.tensordot(x[:, :, 0], w, axes=([1], [1])).transpose(0, 3, 1, 4, 2, 5)
    out = out.reshape(n, d, 1, 2 * h, 2 * wd)
    if b is not None:
        out = out + b.reshape(1, d, 1, 1, 1)
    return np.ascontiguousarray(out), (x, w, b is not None)


def deconv2x2_backward(gout, cache):
    x, w, has_bias = cache
    n, c, _, h, wd = x.shape
    d = w.shape[0]
    g6 = gout[:, :, 0].reshape(n, d, h, 2, wd, 2)
    gx = np.einsum("ndhawb,dcab->nchw", g6, w, optimize=True)[:, :, None]
    gw = np.einsum("ndhawb,nchw->dcab", g6, x[:, :, 0], optimize=True)
    gb = gout.sum(axis=(0, 2, 3, 4)) if has_bias else None
    return np.ascontiguousarray(gx), gw, gb


def relu_forward(x):
    mask = x > 0
    return np.maximum(x, 0), mask


def relu_backward(gout, mask):
    return gout * mask


def sigmoid_forward(x):
    out = expit(x)
    return out, out


def sigmoid_backward(gout, out):
    return gout * out * (1 - out)


# --- weight initialisation -------------------------------------------------

def glorot_uniform(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# --- kernel objects and forward-only wrappers --------------------------------

@dataclass
class Conv3Kernel:
    weight: np.ndarray  # (D, C, lk, kh, kw)
    bias: np.ndarray | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    t_pad: int = 0

    @classmethod
    def spatial(cls, weight, bias=None):
        """A 1 x k x k kernel with size-preserving padding."""
        if weight.ndim == 4:
            weight = weight[:, :, None]
        pad = (same_padding(weight.shape[3]), same_padding(weight.shape[4]))
        return cls(weight, bias, padding=pad)


@dataclass
class RetroKernel:
    weight: np.ndarray  # (D, C, 2, kh, kw)
    bias: np.ndarray | None = None
    dilation: int = 1


@dataclass
class ArppConfig:
    dilations: list[int]
    total_filters: int

    def __post_init__(self):
        self.validate()

    @property
    def branch_filters(self) -> int:
        return self.total_filters // len(self.dilations)

    def validate(self):
        if not self.dilations:
            raise ConfigError("ARPP needs at least one branch")
        if any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilations must be positive: {self.dilations}")
        if len(set(self.dilations)) != len(self.dilations):
            raise ConfigError(f"dilations must be distinct: {self.dilations}")
        if self.total_filters % len(self.dilations):
            raise ConfigError(f"{self.total_filters} filters cannot be split over {len(self.dilations)} branches")


@dataclass
class RetroModuleKernels:
    """One change-extraction branch: retro conv, then two 3x3 spatial convs."""
    retro: RetroKernel
    convs: list[Conv3Kernel] = field(default_factory=list)


def conv3d(x, k: Conv3Kernel):
    return conv3d_forward(x, k.weight, k.bias, k.stride, k.padding, 1, k.t_pad)[0]


def retro_conv(x, k: RetroKernel):
    return retro_forward(x, k.weight, k.bias, k.dilation)[0]


def atrous_retro_conv(x, k: RetroKernel):
    return retro_forward(x, k.weight, k.bias, k.dilation)[0]


def temporal_avg_pool(x):
    return temporal_avg_pool_forward(x)[0]


def deconv2x2(x, weight, bias=None):
    return deconv2x2_forward(x, weight, bias)[0]


def relu(x):
    return relu_forward(x)[0]


def sigmoid(x):
    return sigmoid_forward(x)[0]


def maxpool2(x):
    return maxpool2_forward(x)[0]


def retro_module(x, k: RetroModuleKernels):
    y = relu(retro_conv(x, k.retro))
    for conv in k.convs:
        y = relu(conv3d(y, conv))
    return temporal_avg_pool(y)


def arpp(x, cfg: ArppConfig, branch_kernels: list[RetroModuleKernels]):
    """Parallel atrous retrospective modules, concatenated along channels."""
    cfg.validate()
    if len(branch_kernels) != len(cfg.dilations):
        raise ConfigError(f"{len(cfg.dilations)} dilations but {len(branch_kernels)} branch kernels")
    out = None
    for dil, k in zip(cfg.dilations, branch_kernels):
        if k.retro.dilation != dil:
            raise ConfigError(f"branch kernel dilation {k.retro.dilation} != configured {dil}")
        if k.retro.weight.shape[0] != cfg.branch_filters:
            raise ConfigError(f"branch has {k.retro.weight.shape[0]} filters, expected {cfg.branch_filters}")
        y = retro_module(x, k)
        out = y if out is None else concat_channels(out, y)
    return out
