"""Dense 2-D grid primitives: depthwise 3x3 stencils, bilinear resizing,
kernel rotation.

A "grid" is a float ndarray of shape (..., H, W, C): spatial rows, spatial
columns, channels, with any number of leading batch axes.  All routines are
pure functions and preserve the input dtype (float32 in production, float64
in numerical checks).
"""

from __future__ import annotations

from enum import Enum
from functools import lru_cache

import numpy as np


class PaddingMode(Enum):
    ZERO = "zero"
    REPLICATE = "replicate"
    CIRCULAR = "circular"


# Fixed perception kernels (sobel pair /8, nine-point laplacian /16).
# Convolution here means cross-correlation (no kernel flip), the usual
# convention for cellular automata perception stages.
SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]], dtype=np.float32) / 8.0
SOBEL_Y = SOBEL_X.T.copy()
LAPLACIAN = np.array([[1.0, 2.0, 1.0],
                      [2.0, -12.0, 2.0],
                      [1.0, 2.0, 1.0]], dtype=np.float32) / 16.0
IDENTITY = np.array([[0.0, 0.0, 0.0],
                     [0.0, 1.0, 0.0],
                     [0.0, 0.0, 0.0]], dtype=np.float32)

_NP_PAD_MODE = {
    PaddingMode.ZERO: "constant",
    PaddingMode.REPLICATE: "edge",
    PaddingMode.CIRCULAR: "wrap",
}


def validate_grid(g: np.ndarray) -> None:
    """Raise ValueError unless g is a well-formed (..., H, W, C) grid."""
    if g.ndim < 3:
        raise ValueError(f"grid must have at least 3 axes (H, W, C), got shape {g.shape}")
    h, w, c = g.shape[-3], g.shape[-2], g.shape[-1]
    if h < 1 or w < 1 or c < 1:
        raise ValueError(f"grid axes must be >= 1, got shape {g.shape}")


def pad1(g: np.ndarray, pad: PaddingMode) -> np.ndarray:
    """Pad the two spatial axes by one cell on each side."""
    width = [(0, 0)] * (g.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    return np.pad(g, width, mode=_NP_PAD_MODE[pad])


def conv3x3_depthwise(g: np.ndarray, k: np.ndarray, pad: PaddingMode) -> np.ndarray:
    """Convolve every channel of g independently with the 3x3 kernel k.

    Output has the same shape as g; boundaries are handled by `pad`.
    """
    validate_grid(g)
    h, w = g.shape[-3], g.shape[-2]
    p = pad1(g, pad)
    k = np.asarray(k)
    out = np.zeros_like(g)
    for dy in range(3):
        for dx in range(3):
            wgt = g.dtype.type(k[dy, dx])
            if wgt != 0:
                out += wgt * p[..., dy:dy + h, dx:dx + w, :]
    return out


def conv3x3_adjoint(dout: np.ndarray, k: np.ndarray, pad: PaddingMode) -> np.ndarray:
    """Transpose of conv3x3_depthwise: maps output-space gradients back to
    input space, folding the padding borders per mode.
    """
    h, w = dout.shape[-3], dout.shape[-2]
    k = np.asarray(k)
    dp = np.zeros(dout.shape[:-3] + (h + 2, w + 2, dout.shape[-1]), dtype=dout.dtype)
    for dy in range(3):
        for dx in range(3):
            wgt = dout.dtype.type(k[dy, dx])
            if wgt != 0:
                dp[..., dy:dy + h, dx:dx + w, :] += wgt * dout
    return fold_pad(dp, pad)


def fold_pad(dp: np.ndarray, pad: PaddingMode) -> np.ndarray:
    """Adjoint of pad1: collapse a 1-cell border back onto the interior."""
    h = dp.shape[-3] - 2
    w = dp.shape[-2] - 2
    core = dp[..., 1:-1, 1:-1, :].copy()
    if pad is PaddingMode.ZERO:
        return core
    t, b = dp[..., 0, 1:-1, :], dp[..., h + 1, 1:-1, :]
    l, r = dp[..., 1:-1, 0, :], dp[..., 1:-1, w + 1, :]
    tl, tr = dp[..., 0, 0, :], dp[..., 0, w + 1, :]
    bl, br = dp[..., h + 1, 0, :], dp[..., h + 1, w + 1, :]
    if pad is PaddingMode.REPLICATE:
        core[..., 0, :, :] += t
        core[..., h - 1, :, :] += b
        core[..., :, 0, :] += l
        core[..., :, w - 1, :] += r
        core[..., 0, 0, :] += tl
        core[..., 0, w - 1, :] += tr
        core[..., h - 1, 0, :] += bl
        core[..., h - 1, w - 1, :] += br
    else:  # CIRCULAR: borders wrap to the opposite side
        core[..., h - 1, :, :] += t
        core[..., 0, :, :] += b
        core[..., :, w - 1, :] += l
        core[..., :, 0, :] += r
        core[..., h - 1, w - 1, :] += tl
        core[..., h - 1, 0, :] += tr
        core[..., 0, w - 1, :] += bl
        core[..., 0, 0, :] += br
    return core


@lru_cache(maxsize=256)
def _resize_matrix_f64(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix for 1-D bilinear resize, align-corners=false
    (half-pixel centers, edges clamped).  Rows sum to exactly 1.
    """
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i0 = min(i0, n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        m[o, i0] += 1.0 - f
        m[o, i1] += f
    m.setflags(write=False)
    return m


def resize_matrix(n_in: int, n_out: int, dtype=np.float32) -> np.ndarray:
    return _resize_matrix_f64(n_in, n_out).astype(dtype)


def _apply_resize(g: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    """result[..., o, p, c] = sum_{y,x} mh[o, y] * mw[p, x] * g[..., y, x, c]"""
    lead = g.shape[:-3]
    h, w, c = g.shape[-3:]
    out_h, out_w = mh.shape[0], mw.shape[0]
    t = mh @ g.reshape((-1, h, w * c))                  # (B, out_h, w*c)
    t = t.reshape((-1, out_h, w, c)).swapaxes(-1, -2)   # (B, out_h, c, w)
    t = t @ mw.T                                        # (B, out_h, c, out_w)
    return np.ascontiguousarray(t.swapaxes(-1, -2)).reshape(lead + (out_h, out_w, c))


def bilinear_resize(g: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the spatial axes (align-corners=false).

    Exact for constant inputs; resizing to the same shape returns a copy.
    """
    validate_grid(g)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {out_h}x{out_w}")
    h, w = g.shape[-3], g.shape[-2]
    if (out_h, out_w) == (h, w):
        return g.copy()
    mh = resize_matrix(h, out_h, g.dtype)
    mw = resize_matrix(w, out_w, g.dtype)
    return _apply_resize(g, mh, mw)


def bilinear_resize_adjoint(dout: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Transpose of bilinear_resize back to an (in_h, in_w) grid."""
    out_h, out_w = dout.shape[-3], dout.shape[-2]
    if (out_h, out_w) == (in_h, in_w):
        return dout.copy()
    mh = resize_matrix(in_h, out_h, dout.dtype)
    mw = resize_matrix(in_w, out_w, dout.dtype)
    return _apply_resize(dout, mh.T.copy(), mw.T.copy())


def rotate_kernel(k: np.ndarray, partner: np.ndarray, theta: float):
    """Rotate a gradient kernel pair (sobel-x, sobel-y) by theta radians.

    Returns (cos t * k + sin t * partner, -sin t * k + cos t * partner),
    the kernels measuring derivatives along the rotated axes.
    """
    k = np.asarray(k)
    partner = np.asarray(partner)
    c = k.dtype.type(np.cos(theta))
    s = k.dtype.type(np.sin(theta))
    return c * k + s * partner, -s * k + c * partner
