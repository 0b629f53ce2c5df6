"""PNG ingestion/export and the [-1, 1] <-> uint8 image mapping."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

from .core import to_rgb8, to_unit


def load_image(path) -> np.ndarray:
    """(H, W, 3) float32 in [-1, 1]."""
    img = Image.open(path).convert("RGB")
    return to_unit(np.asarray(img, dtype=np.uint8))


def save_image(path, img: np.ndarray) -> None:
    """Accepts uint8 RGB or float grids (mapped through the display range)."""
    if img.dtype != np.uint8:
        img = to_rgb8(img)
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def _frame_key(p: Path):
    nums = re.findall(r"\d+", p.stem)
    return (int(nums[-1]) if nums else 0, p.name)


def load_video_dir(path) -> list[np.ndarray]:
    """Ordered frames from a directory of numbered PNGs."""
    root = Path(path)
    files = sorted((p for p in root.iterdir() if p.suffix.lower() == ".png"), key=_frame_key)
    if not files:
        raise ValueError(f"no .png frames found in {root}")
    frames = [load_image(p) for p in files]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ValueError(f"video frames disagree in shape: {sorted(shapes)}")
    return frames
