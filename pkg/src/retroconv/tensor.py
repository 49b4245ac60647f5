"""Rank-5 tensors in N x C x L x H x W layout and the resampling primitives.

Tensors are plain ``numpy.ndarray`` objects; this module only adds the
validation, resizing and serialisation helpers the rest of the package needs.
Masks are ``(n, h, w)`` uint8 arrays holding 0 (background) or 1 (change).
"""
from __future__ import annotations

import io
import math
import struct

import numpy as np

from .errors import DimensionError, DimMismatchError, FormatError, MagicError, ShapeError, TruncatedError

RTEN_MAGIC = b"RTEN1"
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}

# Largest element count we accept; anything above cannot be allocated anyway.
MAX_ELEMENTS = 2**48


def _check_dims(dims) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 5:
        raise DimensionError(f"expected 5 dims (n, c, l, h, w), got {len(dims)}")
    if any(d < 1 for d in dims):
        raise DimensionError(f"all dims must be >= 1, got {dims}")
    if math.prod(dims) > MAX_ELEMENTS:
        raise DimensionError(f"dimension product overflows: {dims}")
    return dims


def tensor_create(dims, fill=0.0, dtype=np.float32) -> np.ndarray:
    """Return a tensor of shape ``dims`` with every element equal to ``fill``."""
    return np.full(_check_dims(dims), fill, dtype=dtype)


def check_tensor5(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 5:
        raise ShapeError(f"{name} must be a rank-5 array (n, c, l, h, w), got shape {getattr(x, 'shape', None)}")
    if x.size == 0:
        raise DimensionError(f"{name} has a zero dimension: {x.shape}")
    return x


def check_mask(mask: np.ndarray, clip: np.ndarray | None = None) -> np.ndarray:
    if mask.ndim != 3:
        raise ShapeError(f"mask must be (n, h, w), got {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask values must be exactly 0 or 1")
    if clip is not None and (mask.shape[0], *mask.shape[1:]) != (clip.shape[0], *clip.shape[3:]):
        raise ShapeError(f"mask {mask.shape} does not match clip {clip.shape}")
    return mask


def _linear_taps(n_in: int, n_out: int):
    # align_corners=False source coordinates, clamped at the borders
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_resize(x: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Resample every (n, c, l) slice of ``x`` to ``new_h x new_w``.

    Uses half-pixel (align-corners-false) bilinear interpolation without
    antialiasing. Same-size resizes return an exact copy.
    """
    check_tensor5(x, "x")
    if new_h < 1 or new_w < 1:
        raise DimensionError(f"target size must be >= 1, got {new_h}x{new_w}")
    h, w = x.shape[3:]
    if (h, w) == (new_h, new_w):
        return x.copy()
    dt = x.dtype
    i0, i1, fh = _linear_taps(h, new_h)
    j0, j1, fw = _linear_taps(w, new_w)
    fh = fh.astype(dt)[:, None]
    fw = fw.astype(dt)
    top = x[..., i0, :]
    rows = top + (x[..., i1, :] - top) * fh
    left = rows[..., j0]
    out = left + (rows[..., j1] - left) * fw
    return out.astype(dt, copy=False)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_tensor5(a, "a")
    check_tensor5(b, "b")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}: non-channel dims differ")
    return np.concatenate([a, b], axis=1)


def split_channels(x: np.ndarray, c_first: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`concat_channels`."""
    return x[:, :c_first], x[:, c_first:]


# --- RTEN1 binary format -------------------------------------------------

def write_tensor(f, x: np.ndarray) -> None:
    """Write ``x`` as an RTEN1 record. Arrays of rank < 5 are left-padded with unit dims."""
    x = np.asarray(x)
    if x.dtype not in DTYPE_CODES:
        raise FormatError(f"unsupported dtype {x.dtype}")
    if x.ndim > 5:
        raise ShapeError(f"rank {x.ndim} does not fit RTEN1")
    dims = (1,) * (5 - x.ndim) + x.shape
    f.write(RTEN_MAGIC)
    f.write(struct.pack("<B5Q", DTYPE_CODES[x.dtype], *dims))
    f.write(np.ascontiguousarray(x, dtype=x.dtype.newbyteorder("<")).tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    start = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedError(f"truncated {what}: wanted {n} bytes, got {len(buf)}", start)
    return buf


def read_tensor(f) -> np.ndarray:
    start = f.tell()
    magic = _read_exact(f, 5, "RTEN1 magic")
    if magic != RTEN_MAGIC:
        raise MagicError(f"bad tensor magic {magic!r}", start)
    code, *dims = struct.unpack("<B5Q", _read_exact(f, 41, "RTEN1 header"))
    if code not in CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}", start + 5)
    try:
        dims = _check_dims(dims)
    except DimensionError as e:
        raise DimMismatchError(str(e), start + 6) from None
    dt = CODE_DTYPES[code]
    nbytes = math.prod(dims) * dt.itemsize
    data = _read_exact(f, nbytes, "RTEN1 payload")
    return np.frombuffer(data, dtype=dt.newbyteorder("<")).astype(dt).reshape(dims)


def tensor_to_bytes(x: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, x)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def save_tensor(path, x: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, x)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)
