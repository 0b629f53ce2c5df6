"""The 12 hand-crafted target motion fields, their global normalization,
and color-wheel visualization of flow fields.

A flow field is an (H, W, 2) float32 grid of (u, v) pixel displacements:
u along columns (positive = rightward), v along rows (positive = downward).
Field formulas are evaluated on half-integer lattice coordinates
i = col - W/2 + 0.5, j = row - H/2 + 0.5, which keeps radial denominators
away from zero, then scaled so the mean cell L2 norm is exactly 1.
"""

from __future__ import annotations

from enum import Enum

import numpy as np


class FieldKind(Enum):
    RIGHT = "right"
    UP = "up"
    RIGHT_ACC_RIGHT = "right_acc_right"
    RIGHT_ACC_DOWN = "right_acc_down"
    CIRCULAR = "circular"
    CONVERGE = "converge"
    DIVERGE = "diverge"
    HYPERBOLIC = "hyperbolic"
    TWO_BLOCK_X = "two_block_x"
    TWO_BLOCK_Y = "two_block_y"
    THREE_BLOCK = "three_block"
    FOUR_BLOCK = "four_block"


FIELD_NAMES = [k.value for k in FieldKind]


def lattice(h: int, w: int):
    """Half-integer centered coordinates (i over columns, j over rows)."""
    i = np.arange(w, dtype=np.float64) - w / 2.0 + 0.5
    j = np.arange(h, dtype=np.float64) - h / 2.0 + 0.5
    return np.meshgrid(i, j)  # each (H, W)


def raw_field(kind: FieldKind, h: int, w: int) -> np.ndarray:
    """Un-normalized field values on the lattice, float64 (H, W, 2)."""
    ii, jj = lattice(h, w)
    diag = np.sqrt(float(h) ** 2 + float(w) ** 2)
    rad = np.sqrt(ii * ii + jj * jj)
    one = np.ones_like(ii)
    zero = np.zeros_like(ii)
    if kind is FieldKind.RIGHT:
        u, v = one, zero
    elif kind is FieldKind.UP:
        u, v = zero, -one
    elif kind is FieldKind.RIGHT_ACC_RIGHT:
        u, v = (2.0 * ii + w) / 2.0, zero
    elif kind is FieldKind.RIGHT_ACC_DOWN:
        u, v = (2.0 * jj + h) / 2.0, zero
    elif kind is FieldKind.CIRCULAR:
        u, v = jj / diag, -ii / diag
    elif kind is FieldKind.CONVERGE:
        u, v = -ii / rad, -jj / rad
    elif kind is FieldKind.DIVERGE:
        u, v = ii / rad, jj / rad
    elif kind is FieldKind.HYPERBOLIC:
        u, v = jj / diag, ii / diag
    elif kind is FieldKind.TWO_BLOCK_X:
        pos = jj >= 0
        u, v = np.where(pos, 1.0, -1.0), zero
    elif kind is FieldKind.TWO_BLOCK_Y:
        pos = jj >= 0
        u, v = zero, np.where(pos, 1.0, -1.0)
    elif kind is FieldKind.THREE_BLOCK:
        u = np.where(jj >= 0, 1.0, np.where(ii >= 0, -1.0, 0.0))
        v = np.where(jj >= 0, 0.0, np.where(ii >= 0, 0.0, 1.0))
    elif kind is FieldKind.FOUR_BLOCK:
        u = np.where(jj >= 0, np.where(ii >= 0, 1.0, 0.0), np.where(ii >= 0, 0.0, -1.0))
        v = np.where(jj >= 0, np.where(ii >= 0, 0.0, 1.0), np.where(ii >= 0, -1.0, 0.0))
    else:
        raise ValueError(f"unknown field kind {kind}")
    return np.stack([u, v], axis=-1)


def generate_field(kind: FieldKind | str, h: int, w: int) -> np.ndarray:
    """Target flow field with mean cell L2 norm scaled to exactly 1."""
    if isinstance(kind, str):
        kind = FieldKind(kind)
    if h < 2 or w < 2:
        raise ValueError(f"field size must be >= 2, got {h}x{w}")
    raw = raw_field(kind, h, w)
    mean_norm = np.sqrt((raw ** 2).sum(axis=-1)).mean()
    return (raw / mean_norm).astype(np.float32)


# ---------------------------------------------------------------------------
# flow color wheel (Baker-style visualization)


def _color_wheel() -> np.ndarray:
    """55-color wheel over the RY/YG/GC/CB/BM/MR sectors, values in [0, 1]."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    col = 0
    wheel[:ry, 0] = 255
    wheel[:ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col:col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col:col + yg, 1] = 255
    col += yg
    wheel[col:col + gc, 1] = 255
    wheel[col:col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col:col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col:col + cb, 2] = 255
    col += cb
    wheel[col:col + bm, 2] = 255
    wheel[col:col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col:col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col:col + mr, 0] = 255
    return wheel / 255.0


_WHEEL = _color_wheel()


def colorize_flow(flow: np.ndarray, max_norm: float | None = None) -> np.ndarray:
    """Color-wheel rendering of a flow field as an (H, W, 3) uint8 image.

    Hue encodes the flow angle, saturation the magnitude relative to the
    field's maximum; the zero vector renders white.
    """
    u = flow[..., 0].astype(np.float64)
    v = flow[..., 1].astype(np.float64)
    rad = np.sqrt(u * u + v * v)
    if max_norm is None:
        max_norm = rad.max()
    if max_norm > 0:
        rad = np.minimum(rad / max_norm, 1.0)
    ncols = _WHEEL.shape[0]
    a = np.arctan2(-v, -u) / np.pi
    fk = (a + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = (1.0 - f) * _WHEEL[k0] + f * _WHEEL[k1]
    col = 1.0 - rad[..., None] * (1.0 - col)
    return np.floor(255.0 * col).astype(np.uint8)


def write_field_raw(flow: np.ndarray, path) -> None:
    """Raw export: little-endian float32, u plane then v plane, row-major."""
    with open(path, "wb") as fh:
        fh.write(flow[..., 0].astype("<f4").tobytes())
        fh.write(flow[..., 1].astype("<f4").tobytes())


def read_field_raw(path, h: int, w: int) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size != 2 * h * w:
        raise ValueError(f"expected {2 * h * w} floats for {h}x{w} field, got {data.size}")
    u = data[:h * w].reshape(h, w)
    v = data[h * w:].reshape(h, w)
    return np.stack([u, v], axis=-1)
