"""Optional numba-accelerated inner loops for the real-time engine.

Everything here has a numpy twin in core.Engine; results agree to float32
rounding (the JIT contracts multiply-adds into FMAs).  Import failure is
fine: the engine falls back to the numpy path.
"""

from __future__ import annotations

import numpy as np

try:
    import numba as nb

    HAVE_NUMBA = True
except Exception:  # pragma: no cover - exercised only without numba
    nb = None
    HAVE_NUMBA = False


if HAVE_NUMBA:

    @nb.njit(cache=True, fastmath=True)
    def perception_single_scale(s, z, cs, sn, pad_mode):
        """Fill z[..., :4C] with [identity, grad-u, grad-v, laplacian] of s.

        cs/sn are per-cell cosine/sine of the kernel rotation (all-ones /
        all-zeros when uncontrolled).  pad_mode: 0 zero, 1 replicate,
        2 circular.
        """
        h, w, c = s.shape
        for y in range(h):
            ym = y - 1
            yp = y + 1
            if pad_mode == 1:
                if ym < 0:
                    ym = 0
                if yp > h - 1:
                    yp = h - 1
            elif pad_mode == 2:
                if ym < 0:
                    ym = h - 1
                if yp > h - 1:
                    yp = 0
            ytop_ok = not (pad_mode == 0 and y == 0)
            ybot_ok = not (pad_mode == 0 and y == h - 1)
            for x in range(w):
                xm = x - 1
                xp = x + 1
                if pad_mode == 1:
                    if xm < 0:
                        xm = 0
                    if xp > w - 1:
                        xp = w - 1
                elif pad_mode == 2:
                    if xm < 0:
                        xm = w - 1
                    if xp > w - 1:
                        xp = 0
                xl_ok = not (pad_mode == 0 and x == 0)
                xr_ok = not (pad_mode == 0 and x == w - 1)
                co = cs[y, x]
                si = sn[y, x]
                for ch in range(c):
                    a = s[ym, xm, ch] if (ytop_ok and xl_ok) else np.float32(0)
                    b = s[ym, x, ch] if ytop_ok else np.float32(0)
                    cc = s[ym, xp, ch] if (ytop_ok and xr_ok) else np.float32(0)
                    d = s[y, xm, ch] if xl_ok else np.float32(0)
                    e = s[y, x, ch]
                    f = s[y, xp, ch] if xr_ok else np.float32(0)
                    g = s[yp, xm, ch] if (ybot_ok and xl_ok) else np.float32(0)
                    hh = s[yp, x, ch] if ybot_ok else np.float32(0)
                    i = s[yp, xp, ch] if (ybot_ok and xr_ok) else np.float32(0)
                    gx = (cc - a + np.float32(2.0) * (f - d) + i - g) * np.float32(0.125)
                    gy = (g - a + np.float32(2.0) * (hh - b) + i - cc) * np.float32(0.125)
                    lap = (a + cc + g + i
                           + np.float32(2.0) * (b + d + f + hh)
                           - np.float32(12.0) * e) * np.float32(0.0625)
                    z[y, x, ch] = e
                    z[y, x, c + ch] = co * gx + si * gy
                    z[y, x, 2 * c + ch] = co * gy - si * gx
                    z[y, x, 3 * c + ch] = lap

    @nb.njit(cache=True, fastmath=True)
    def perception_gather(s, za, idx, cpe, cs, sn, pad_mode):
        """Perception rows for the active cells only: za[i] holds the
        [identity, grad-u, grad-v, laplacian, cpe] vector of flat cell
        idx[i].  Layout and arithmetic match perception_single_scale."""
        h, w, c = s.shape
        ncpe = cpe.shape[2]
        for i in range(idx.shape[0]):
            flat = idx[i]
            y = flat // w
            x = flat - y * w
            ym = y - 1
            yp = y + 1
            xm = x - 1
            xp = x + 1
            if pad_mode == 1:
                if ym < 0:
                    ym = 0
                if yp > h - 1:
                    yp = h - 1
                if xm < 0:
                    xm = 0
                if xp > w - 1:
                    xp = w - 1
            elif pad_mode == 2:
                if ym < 0:
                    ym = h - 1
                if yp > h - 1:
                    yp = 0
                if xm < 0:
                    xm = w - 1
                if xp > w - 1:
                    xp = 0
            ytop_ok = not (pad_mode == 0 and y == 0)
            ybot_ok = not (pad_mode == 0 and y == h - 1)
            xl_ok = not (pad_mode == 0 and x == 0)
            xr_ok = not (pad_mode == 0 and x == w - 1)
            co = cs[y, x]
            si = sn[y, x]
            for ch in range(c):
                a = s[ym, xm, ch] if (ytop_ok and xl_ok) else np.float32(0)
                b = s[ym, x, ch] if ytop_ok else np.float32(0)
                cc = s[ym, xp, ch] if (ytop_ok and xr_ok) else np.float32(0)
                d = s[y, xm, ch] if xl_ok else np.float32(0)
                e = s[y, x, ch]
                f = s[y, xp, ch] if xr_ok else np.float32(0)
                g = s[yp, xm, ch] if (ybot_ok and xl_ok) else np.float32(0)
                hh = s[yp, x, ch] if ybot_ok else np.float32(0)
                ii = s[yp, xp, ch] if (ybot_ok and xr_ok) else np.float32(0)
                gx = (cc - a + np.float32(2.0) * (f - d) + ii - g) * np.float32(0.125)
                gy = (g - a + np.float32(2.0) * (hh - b) + ii - cc) * np.float32(0.125)
                lap = (a + cc + g + ii
                       + np.float32(2.0) * (b + d + f + hh)
                       - np.float32(12.0) * e) * np.float32(0.0625)
                za[i, ch] = e
                za[i, c + ch] = co * gx + si * gy
                za[i, 2 * c + ch] = co * gy - si * gx
                za[i, 3 * c + ch] = lap
            for q in range(ncpe):
                za[i, 4 * c + q] = cpe[y, x, q]

    @nb.njit(cache=True, fastmath=True)
    def perception_adjoint(dz, ds, pad_mode):
        """Adjoint of perception_single_scale with identity rotation:
        accumulate into ds the transpose action of [identity, sobel-x,
        sobel-y, laplacian] blocks of dz.  Scatter targets use the same
        index resolution as the forward pass, which implements the padding
        fold (clamped indices for replicate, wrapped for circular, skipped
        taps for zero)."""
        h, w, c = ds.shape
        for y in range(h):
            ym = y - 1
            yp = y + 1
            if pad_mode == 1:
                if ym < 0:
                    ym = 0
                if yp > h - 1:
                    yp = h - 1
            elif pad_mode == 2:
                if ym < 0:
                    ym = h - 1
                if yp > h - 1:
                    yp = 0
            ytop_ok = not (pad_mode == 0 and y == 0)
            ybot_ok = not (pad_mode == 0 and y == h - 1)
            for x in range(w):
                xm = x - 1
                xp = x + 1
                if pad_mode == 1:
                    if xm < 0:
                        xm = 0
                    if xp > w - 1:
                        xp = w - 1
                elif pad_mode == 2:
                    if xm < 0:
                        xm = w - 1
                    if xp > w - 1:
                        xp = 0
                xl_ok = not (pad_mode == 0 and x == 0)
                xr_ok = not (pad_mode == 0 and x == w - 1)
                for ch in range(c):
                    dgx = dz[y, x, c + ch] * np.float32(0.125)
                    dgy = dz[y, x, 2 * c + ch] * np.float32(0.125)
                    dl = dz[y, x, 3 * c + ch] * np.float32(0.0625)
                    ds[y, x, ch] += dz[y, x, ch] - np.float32(12.0) * dl
                    if ytop_ok and xl_ok:
                        ds[ym, xm, ch] += -dgx - dgy + dl
                    if ytop_ok:
                        ds[ym, x, ch] += np.float32(-2.0) * dgy + np.float32(2.0) * dl
                    if ytop_ok and xr_ok:
                        ds[ym, xp, ch] += dgx - dgy + dl
                    if xl_ok:
                        ds[y, xm, ch] += np.float32(-2.0) * dgx + np.float32(2.0) * dl
                    if xr_ok:
                        ds[y, xp, ch] += np.float32(2.0) * dgx + np.float32(2.0) * dl
                    if ybot_ok and xl_ok:
                        ds[yp, xm, ch] += -dgx + dgy + dl
                    if ybot_ok:
                        ds[yp, x, ch] += np.float32(2.0) * dgy + np.float32(2.0) * dl
                    if ybot_ok and xr_ok:
                        ds[yp, xp, ch] += dgx + dgy + dl

    @nb.njit(cache=True, fastmath=True)
    def bias_relu(h, b):
        n, m = h.shape
        for i in range(n):
            for j in range(m):
                v = h[i, j] + b[j]
                h[i, j] = v if v > 0 else np.float32(0)

    @nb.njit(cache=True)
    def scatter_add(s_flat, idx, delta):
        n, c = delta.shape
        for i in range(n):
            row = idx[i]
            for j in range(c):
                s_flat[row, j] += delta[i, j]

else:  # pragma: no cover
    perception_single_scale = None
    bias_relu = None
    scatter_add = None
