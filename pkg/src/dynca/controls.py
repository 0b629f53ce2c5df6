"""Post-training live editing: motion direction, speed, the erasing brush,
per-cell coordinate transforms, and state resizing.

Controls mutate a ControlState snapshot; the synthesis loop applies the
snapshot to its engine between steps only, which keeps every edit a clean
serialization point.  Kernel rotation is realized by combining the raw
gradient responses per cell (equals rotating the kernel pair, by
linearity), so global and per-cell transforms share one code path and a
constant map is bit-identical to the global rotation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DyncaConfig, Engine, NcaState, make_seed


@dataclass
class ControlState:
    theta: float = 0.0                    # global direction offset, radians
    theta_map: np.ndarray | None = None   # optional per-cell angles (H, W)
    t_live: int = 24                      # steps per emitted frame
    pending_brushes: list = field(default_factory=list)  # (cx, cy, radius)

    def effective_angles(self, h: int, w: int):
        """Scalar angle, or an (H, W) map when a local transform is set."""
        if self.theta_map is None:
            return self.theta
        if self.theta_map.shape != (h, w):
            raise ValueError(
                f"transform map shape {self.theta_map.shape} != grid {(h, w)}")
        return self.theta + self.theta_map


def set_direction(ctrl: ControlState, theta: float) -> ControlState:
    """Subsequent steps see the gradient kernels and the positional
    encoding rotated by theta."""
    ctrl.theta = float(theta)
    return ctrl


def set_speed(ctrl: ControlState, t_live: int) -> ControlState:
    """Change how many automaton steps make one video frame.  Dynamics are
    untouched; only the emission stride changes."""
    if t_live < 1:
        raise ValueError(f"steps per frame must be >= 1, got {t_live}")
    ctrl.t_live = int(t_live)
    return ctrl


def circular_from_right_map(h: int, w: int) -> np.ndarray:
    """The arctan((i - W/2) / (j - H/2)) per-cell angle map that bends a
    rightward motion into a circular one.  The removable 0/0 at the exact
    center is defined as 0."""
    cols = np.arange(w, dtype=np.float64) - w / 2.0
    rows = np.arange(h, dtype=np.float64) - h / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        m = np.arctan(cols[None, :] / rows[:, None])
    return np.nan_to_num(m, nan=0.0).astype(np.float32)


def set_local_transform(ctrl: ControlState, kind, h: int | None = None,
                        w: int | None = None) -> ControlState:
    """kind: None, "circular_from_right", or an explicit (H, W) angle map."""
    if kind is None or (isinstance(kind, str) and kind == "none"):
        ctrl.theta_map = None
    elif isinstance(kind, str):
        if kind != "circular_from_right":
            raise ValueError(f"unknown transform {kind!r}")
        if h is None or w is None:
            raise ValueError("circular_from_right needs the grid size")
        ctrl.theta_map = circular_from_right_map(h, w)
    else:
        m = np.asarray(kind, dtype=np.float32)
        if m.ndim != 2:
            raise ValueError(f"transform map must be 2-D, got shape {m.shape}")
        ctrl.theta_map = m
    return ctrl


def apply_controls(engine: Engine, ctrl: ControlState) -> None:
    """Push the rotation snapshot into an engine (between steps only)."""
    ang = ctrl.effective_angles(engine.h, engine.w)
    engine.set_rotation(np.cos(ang), np.sin(ang))


def brush_erase(state: NcaState, center, radius: float) -> NcaState:
    """Reset all channels inside the disk to the seed value (zero).

    center is (x, y) in grid coordinates (x along columns); cells whose
    center lies within `radius` are erased.  Idempotent; the step counter
    is untouched.
    """
    if radius <= 0:
        raise ValueError(f"brush radius must be positive, got {radius}")
    cx, cy = float(center[0]), float(center[1])
    h, w = state.grid.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
    out = state.copy()
    out.grid[mask] = 0.0
    return out


def resize_state(state: NcaState, cfg: DyncaConfig, new_h: int, new_w: int) -> NcaState:
    """Resolution control restarts the automaton: a fresh seed at the new
    size (even when the size is unchanged)."""
    return make_seed(cfg, new_h, new_w)
