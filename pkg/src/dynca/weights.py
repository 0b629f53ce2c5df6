"""Binary container for trained rules and feature banks.

Rule checkpoint layout (little-endian throughout):

    magic   4 bytes  "DYNC"
    version u16      (currently 1)
    C       u16      state channels
    FC      u16      hidden width
    nscales u16      followed by nscales * u16 scale factors
    padding u8       0 zero / 1 replicate / 2 circular
    use_cpe u8
    T       u16      frame interval
    rate    f32      update rate
    w1      f32[in_dim * FC]   row-major
    b1      f32[FC]
    w2      f32[FC * C]        row-major

Feature-bank files share the magic/version then carry a 4-byte section tag
"FXW1", u16 level count, and per level u16 rows / u16 cols + f32 data.
"""

from __future__ import annotations

import struct

import numpy as np

from .core import DyncaConfig, UpdateRule
from .grid import PaddingMode

MAGIC = b"DYNC"
VERSION = 1

_PAD_TO_CODE = {PaddingMode.ZERO: 0, PaddingMode.REPLICATE: 1, PaddingMode.CIRCULAR: 2}
_CODE_TO_PAD = {v: k for k, v in _PAD_TO_CODE.items()}


class WeightFormatError(Exception):
    """Base class for checkpoint format problems."""


class BadMagicError(WeightFormatError):
    pass


class BadVersionError(WeightFormatError):
    pass


class TruncatedFileError(WeightFormatError):
    pass


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"file truncated: wanted {n} bytes at offset {self.pos}, have {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.take(4))[0]

    def f32_array(self, count: int) -> np.ndarray:
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4", count=count).copy()

    def done(self) -> bool:
        return self.pos == len(self.data)


def _check_header(r: _Reader):
    if r.take(4) != MAGIC:
        raise BadMagicError("not a DYNC file (bad magic)")
    version = r.u16()
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version}, expected {VERSION}")


def save_rule(path, rule: UpdateRule, cfg: DyncaConfig) -> None:
    rule.check_dims(cfg)
    parts = [MAGIC, struct.pack("<H", VERSION)]
    parts.append(struct.pack("<HHH", cfg.channels, cfg.hidden_width, len(cfg.scales)))
    parts.append(struct.pack(f"<{len(cfg.scales)}H", *cfg.scales))
    parts.append(struct.pack("<BB", _PAD_TO_CODE[cfg.padding], int(cfg.use_cpe)))
    parts.append(struct.pack("<H", cfg.frame_interval))
    parts.append(struct.pack("<f", cfg.update_rate))
    for arr in (rule.w1, rule.b1, rule.w2):
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_rule(path):
    """Returns (rule, cfg); raises a distinct error per corruption kind."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    _check_header(r)
    c = r.u16()
    fc = r.u16()
    nscales = r.u16()
    scales = tuple(r.u16() for _ in range(nscales))
    pad_code = r.u8()
    if pad_code not in _CODE_TO_PAD:
        raise WeightFormatError(f"unknown padding code {pad_code}")
    use_cpe = bool(r.u8())
    frame_interval = r.u16()
    rate = r.f32()
    cfg = DyncaConfig(
        channels=c,
        hidden_width=fc,
        padding=_CODE_TO_PAD[pad_code],
        scales=scales,
        use_cpe=use_cpe,
        frame_interval=frame_interval,
        update_rate=rate,
    )
    w1 = r.f32_array(cfg.in_dim * fc).reshape(cfg.in_dim, fc)
    b1 = r.f32_array(fc)
    w2 = r.f32_array(fc * c).reshape(fc, c)
    if not r.done():
        raise WeightFormatError(f"{len(r.data) - r.pos} trailing bytes after weights")
    return UpdateRule(w1, b1, w2), cfg


FEATURE_BANK_TAG = b"FXW1"


def save_feature_bank(path, filters: list[np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<H", VERSION), FEATURE_BANK_TAG,
             struct.pack("<H", len(filters))]
    for f in filters:
        f = np.ascontiguousarray(f, dtype="<f4")
        if f.ndim != 2:
            raise ValueError(f"filter banks must be 2-D (taps x width), got {f.shape}")
        parts.append(struct.pack("<HH", f.shape[0], f.shape[1]))
        parts.append(f.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_feature_bank(path) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    _check_header(r)
    tag = r.take(4)
    if tag != FEATURE_BANK_TAG:
        raise WeightFormatError(f"unknown section tag {tag!r}, expected {FEATURE_BANK_TAG!r}")
    levels = r.u16()
    out = []
    for _ in range(levels):
        rows = r.u16()
        cols = r.u16()
        out.append(r.f32_array(rows * cols).reshape(rows, cols))
    if not r.done():
        raise WeightFormatError("trailing bytes after feature bank")
    return out
