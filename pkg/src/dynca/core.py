"""The cell-state machine: perception, positional encoding, the two-layer
update rule, stochastic residual updates, and rollout.

A state is an (H, W, C) float32 grid whose first three channels render as
RGB.  One step gathers a 4C perception vector per cell (identity, sobel-x,
sobel-y, laplacian responses, summed over a bilinear pyramid when multiple
scales are configured), appends the two positional-encoding channels, pushes
every cell through a shared two-layer MLP, and applies the residual through
a per-cell Bernoulli gate.  The gate is a counter-based hash of
(seed, step, row, col), so rollouts are bit-reproducible regardless of
execution order or thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _kernels as _K
from . import autodiff as ad
from . import grid as G
from .grid import IDENTITY, LAPLACIAN, SOBEL_X, SOBEL_Y, PaddingMode


@dataclass(frozen=True)
class DyncaConfig:
    channels: int = 12
    hidden_width: int = 96
    seed_h: int = 128
    seed_w: int = 128
    padding: PaddingMode = PaddingMode.REPLICATE
    scales: tuple = (1,)
    use_cpe: bool = True
    frame_interval: int = 24
    update_rate: float = 0.5

    def __post_init__(self):
        if self.channels < 4:
            raise ValueError("need at least 4 channels (RGB + 1 hidden)")
        scales = tuple(self.scales)
        object.__setattr__(self, "scales", scales)
        if not scales or scales[0] != 1 or list(scales) != sorted(scales):
            raise ValueError(f"scales must be ascending and start at 1, got {scales}")
        if not (0.0 < self.update_rate <= 1.0):
            raise ValueError(f"update_rate must be in (0, 1], got {self.update_rate}")
        if self.frame_interval < 1:
            raise ValueError("frame_interval must be >= 1")

    @property
    def in_dim(self) -> int:
        return 4 * self.channels + (2 if self.use_cpe else 0)


def preset(name: str, seed_size: int = 128, frame_interval: int = 24) -> DyncaConfig:
    """The two published model sizes.  Multi-scale perception is enabled
    only for the 256 seed size; positional encoding is always on."""
    sizes = {"S": (12, 96), "L": (16, 128)}
    if name.upper() not in sizes:
        raise ValueError(f"unknown config {name!r}, expected S or L")
    c, fc = sizes[name.upper()]
    scales = (1, 2, 4) if seed_size >= 256 else (1,)
    return DyncaConfig(
        channels=c,
        hidden_width=fc,
        seed_h=seed_size,
        seed_w=seed_size,
        scales=scales,
        frame_interval=frame_interval,
    )


def parameter_count(cfg: DyncaConfig) -> int:
    """Trainable parameters: first layer with bias, second layer bias-free."""
    fc = cfg.hidden_width
    return cfg.in_dim * fc + fc + fc * cfg.channels


@dataclass
class NcaState:
    grid: np.ndarray  # (H, W, C) float32
    step_count: int = 0

    @property
    def height(self):
        return self.grid.shape[0]

    @property
    def width(self):
        return self.grid.shape[1]

    def copy(self) -> "NcaState":
        return NcaState(self.grid.copy(), self.step_count)


@dataclass
class UpdateRule:
    w1: np.ndarray  # (in_dim, FC)
    b1: np.ndarray  # (FC,)
    w2: np.ndarray  # (FC, C), zero-initialized for a seed-stable start

    @classmethod
    def create(cls, cfg: DyncaConfig, seed: int = 0) -> "UpdateRule":
        rng = np.random.default_rng(seed)
        lim = np.sqrt(6.0 / cfg.in_dim)
        w1 = rng.uniform(-lim, lim, size=(cfg.in_dim, cfg.hidden_width)).astype(np.float32)
        # nonzero bias keeps hidden units off the relu kink at the zero seed
        kb = 1.0 / np.sqrt(cfg.in_dim)
        b1 = rng.uniform(-kb, kb, size=cfg.hidden_width).astype(np.float32)
        w2 = np.zeros((cfg.hidden_width, cfg.channels), dtype=np.float32)
        return cls(w1, b1, w2)

    def check_dims(self, cfg: DyncaConfig):
        if self.w1.shape != (cfg.in_dim, cfg.hidden_width):
            raise ValueError(f"w1 shape {self.w1.shape} does not match config {(cfg.in_dim, cfg.hidden_width)}")
        if self.b1.shape != (cfg.hidden_width,):
            raise ValueError(f"b1 shape {self.b1.shape} does not match config")
        if self.w2.shape != (cfg.hidden_width, cfg.channels):
            raise ValueError(f"w2 shape {self.w2.shape} does not match config")

    def params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2}

    def copy(self) -> "UpdateRule":
        return UpdateRule(self.w1.copy(), self.b1.copy(), self.w2.copy())


def min_size_for(cfg: DyncaConfig) -> int:
    """The pyramid's coarsest level must still support a 3x3 stencil."""
    return max(8, 3 * max(cfg.scales))


def check_grid_size(cfg: DyncaConfig, h: int, w: int):
    smin = min_size_for(cfg)
    if h < smin or w < smin:
        raise ValueError(f"grid {h}x{w} too small for 3x3 stencil + pyramid (min {smin})")
    s = max(cfg.scales)
    if h % s or w % s:
        raise ValueError(f"grid {h}x{w} not divisible by pyramid scale {s}")


def make_seed(cfg: DyncaConfig, h: int | None = None, w: int | None = None) -> NcaState:
    """All-zero starting state.  h, w may differ from the training seed size;
    synthesis at new sizes is a post-training feature."""
    h = cfg.seed_h if h is None else h
    w = cfg.seed_w if w is None else w
    check_grid_size(cfg, h, w)
    return NcaState(np.zeros((h, w, cfg.channels), dtype=np.float32), 0)


# ---------------------------------------------------------------------------
# positional encoding


def positional_encoding(h: int, w: int, dtype=np.float32) -> np.ndarray:
    """(H, W, 2) grid with channel 0 = (2i+1)/W - 1 over columns i and
    channel 1 = (2j+1)/H - 1 over rows j, entries in (-1, 1)."""
    cols = (2.0 * np.arange(w) + 1.0) / w - 1.0
    rows = (2.0 * np.arange(h) + 1.0) / h - 1.0
    p = np.empty((h, w, 2), dtype=dtype)
    p[:, :, 0] = cols[None, :]
    p[:, :, 1] = rows[:, None]
    return p


def rotate_positional_encoding(p: np.ndarray, cos, sin) -> np.ndarray:
    """Apply the planar rotation to the coordinate channels.  cos/sin may be
    scalars or (H, W) maps for per-cell transforms."""
    c = np.asarray(cos, dtype=p.dtype)
    s = np.asarray(sin, dtype=p.dtype)
    px, py = p[..., 0], p[..., 1]
    out = np.empty_like(p)
    out[..., 0] = c * px + s * py
    out[..., 1] = -s * px + c * py
    return out


# ---------------------------------------------------------------------------
# stochastic update mask (counter-based)

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)


def _mix(x: np.ndarray) -> np.ndarray:
    x = x.copy()
    x ^= x >> np.uint64(30)
    x *= _M2
    x ^= x >> np.uint64(27)
    x *= _M3
    x ^= x >> np.uint64(31)
    return x


def mask_uniform(seed: int, step: int, h: int, w: int) -> np.ndarray:
    """Uniform [0,1) draw per cell, a pure function of (seed, step, i, j)."""
    with np.errstate(over="ignore"):
        base = _mix(np.array(
            (np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * _M1) ^ (np.uint64(step) * _M3),
            dtype=np.uint64).reshape(1, 1))
        rows = np.arange(h, dtype=np.uint64)[:, None] << np.uint64(32)
        cols = np.arange(w, dtype=np.uint64)[None, :]
        x = _mix((rows | cols) ^ base)
    return (x >> np.uint64(40)).astype(np.float32) * np.float32(2.0 ** -24)


def update_mask(seed: int, step: int, h: int, w: int, rate: float) -> np.ndarray:
    """Bernoulli(rate) gate as a float32 0/1 grid of shape (H, W, 1)."""
    u = mask_uniform(seed, step, h, w)
    return (u < np.float32(rate)).astype(np.float32)[..., None]


# ---------------------------------------------------------------------------
# perception (value path)


def perceive(state: NcaState | np.ndarray, cfg: DyncaConfig, kernels=None) -> np.ndarray:
    """Single-scale perception: channel blocks [identity, grad-x, grad-y,
    laplacian], shape (..., H, W, 4C)."""
    g = state.grid if isinstance(state, NcaState) else state
    kx, ky, kl = kernels if kernels is not None else (SOBEL_X, SOBEL_Y, LAPLACIAN)
    gx = G.conv3x3_depthwise(g, kx, cfg.padding)
    gy = G.conv3x3_depthwise(g, ky, cfg.padding)
    lap = G.conv3x3_depthwise(g, kl, cfg.padding)
    return np.concatenate([g, gx, gy, lap], axis=-1)


def perceive_multiscale(state: NcaState | np.ndarray, cfg: DyncaConfig, kernels=None) -> np.ndarray:
    """Perceive on a bilinear pyramid and sum the upsampled responses."""
    g = state.grid if isinstance(state, NcaState) else state
    h, w = g.shape[-3], g.shape[-2]
    smax = max(cfg.scales)
    if h % smax or w % smax:
        raise ValueError(f"grid {h}x{w} not divisible by max scale {smax}")
    total = None
    for s in cfg.scales:
        level = g if s == 1 else G.bilinear_resize(g, h // s, w // s)
        z = perceive(level, cfg, kernels)
        if s != 1:
            z = G.bilinear_resize(z, h, w)
        total = z if total is None else total + z
    return total


# ---------------------------------------------------------------------------
# single-step / rollout (value path, convenience)


def step(state: NcaState, rule: UpdateRule, cfg: DyncaConfig, seed: int = 0) -> NcaState:
    """One stochastic residual update; returns a new state."""
    rule.check_dims(cfg)
    eng = Engine(cfg, rule, state=state, seed=seed)
    eng.step()
    return eng.state()


def rollout(state: NcaState, rule: UpdateRule, cfg: DyncaConfig, seed: int,
            n: int, collect_frames: bool = True, threads: int = 1):
    """Apply n steps; collect the RGB frame at every multiple of the frame
    interval.  Returns (final state, list of uint8 frames)."""
    eng = Engine(cfg, rule, state=state, seed=seed, threads=threads)
    frames = []
    for _ in range(n):
        eng.step()
        if collect_frames and eng.t % cfg.frame_interval == 0:
            frames.append(eng.rgb8())
    return eng.state(), frames


def to_rgb8(grid: np.ndarray) -> np.ndarray:
    """Display mapping: clamp to [-1, 1], scale to [0, 255], round."""
    rgb = np.clip(grid[..., :3], -1.0, 1.0)
    return np.rint(rgb * 127.5 + 127.5).astype(np.uint8)


def to_unit(img8: np.ndarray) -> np.ndarray:
    """Inverse display mapping for loaded images: uint8 -> [-1, 1] float32."""
    return (img8.astype(np.float32) - 127.5) / 127.5


# ---------------------------------------------------------------------------
# fast engine (inference hot path)


class Engine:
    """Preallocated-buffer stepper for real-time synthesis.

    Supports the live editing hooks: a global or per-cell rotation of the
    gradient kernel pair and the positional encoding (by linearity, rotating
    the kernels equals combining the raw responses cell-wise), and a frame
    stride decoupled from the automaton dynamics.

    Hot path: a fused single-scale perception kernel, then the MLP evaluated
    only on the cells selected by the update gate (gather, two sgemms,
    scatter-add).  With `threads > 1` the gemms run in row chunks on a
    thread pool; outputs are bit-equal to the single-threaded path because
    per-cell arithmetic is unchanged.
    """

    def __init__(self, cfg: DyncaConfig, rule: UpdateRule, h: int | None = None,
                 w: int | None = None, state: NcaState | None = None,
                 seed: int = 0, threads: int = 1):
        rule.check_dims(cfg)
        self.cfg = cfg
        self.rule = rule
        self.seed = seed
        self.threads = max(1, threads)
        self._pool = None
        if state is None:
            state = make_seed(cfg, h, w)
        else:
            check_grid_size(cfg, state.height, state.width)
            state = state.copy()
        self.s = np.ascontiguousarray(state.grid, dtype=np.float32)
        self.t = state.step_count
        self.h, self.w = self.s.shape[0], self.s.shape[1]
        c, fc, ind = cfg.channels, cfg.hidden_width, cfg.in_dim
        hw = self.h * self.w
        self._z = np.zeros((self.h, self.w, ind), dtype=np.float32)
        self._za = np.zeros((hw, ind), dtype=np.float32)
        self._hid = np.zeros((hw, fc), dtype=np.float32)
        self._delta = np.zeros((hw, c), dtype=np.float32)
        self._cos = np.ones((self.h, self.w), dtype=np.float32)
        self._sin = np.zeros((self.h, self.w), dtype=np.float32)
        self._base_cpe = positional_encoding(self.h, self.w) if cfg.use_cpe else None
        self._cpe_rot = np.zeros((self.h, self.w, 2 if cfg.use_cpe else 0), dtype=np.float32)
        self._idx_all = np.arange(hw, dtype=np.int64)
        self._use_fast = _K.HAVE_NUMBA and cfg.scales == (1,)
        self._refresh_cpe()

    # -- control hooks ------------------------------------------------------

    def set_rotation(self, cos, sin):
        """cos/sin of the kernel/CPE rotation angle; scalars or (H, W) maps."""
        self._cos = np.broadcast_to(np.asarray(cos, dtype=np.float32), (self.h, self.w)).copy()
        self._sin = np.broadcast_to(np.asarray(sin, dtype=np.float32), (self.h, self.w)).copy()
        self._refresh_cpe()

    def _refresh_cpe(self):
        if self._base_cpe is None:
            return
        rotated = rotate_positional_encoding(self._base_cpe, self._cos, self._sin)
        self._cpe_rot = rotated
        self._z[:, :, 4 * self.cfg.channels:] = rotated

    def state(self) -> NcaState:
        return NcaState(self.s.copy(), self.t)

    def load_state(self, state: NcaState):
        check_grid_size(self.cfg, state.height, state.width)
        if state.grid.shape != self.s.shape:
            self.__init__(self.cfg, self.rule, state=state, seed=self.seed, threads=self.threads)
        else:
            self.s[...] = state.grid
            self.t = state.step_count

    def rgb8(self) -> np.ndarray:
        return to_rgb8(self.s)

    # -- stepping -----------------------------------------------------------

    _PAD_CODE = {PaddingMode.ZERO: 0, PaddingMode.REPLICATE: 1, PaddingMode.CIRCULAR: 2}

    def _perception_into_z(self):
        if self._use_fast:
            _K.perception_single_scale(self.s, self._z, self._cos, self._sin,
                                       self._PAD_CODE[self.cfg.padding])
            return
        cfg = self.cfg
        c = cfg.channels
        z = self._z
        h, w = self.h, self.w
        cs3 = self._cos[..., None]
        sn3 = self._sin[..., None]
        first = True
        for sc in cfg.scales:
            g = self.s if sc == 1 else G.bilinear_resize(self.s, h // sc, w // sc)
            gx = G.conv3x3_depthwise(g, SOBEL_X, cfg.padding)
            gy = G.conv3x3_depthwise(g, SOBEL_Y, cfg.padding)
            lap = G.conv3x3_depthwise(g, LAPLACIAN, cfg.padding)
            if sc != 1:
                g = G.bilinear_resize(g, h, w)
                gx = G.bilinear_resize(gx, h, w)
                gy = G.bilinear_resize(gy, h, w)
                lap = G.bilinear_resize(lap, h, w)
            gx, gy = cs3 * gx + sn3 * gy, cs3 * gy - sn3 * gx
            if first:
                z[:, :, :c] = g
                z[:, :, c:2 * c] = gx
                z[:, :, 2 * c:3 * c] = gy
                z[:, :, 3 * c:4 * c] = lap
                first = False
            else:
                z[:, :, :c] += g
                z[:, :, c:2 * c] += gx
                z[:, :, 2 * c:3 * c] += gy
                z[:, :, 3 * c:4 * c] += lap

    def _dense_rows(self, za, hid, delta):
        """MLP on a row block: delta = relu(za @ w1 + b1) @ w2."""
        np.dot(za, self.rule.w1, out=hid)
        if _K.HAVE_NUMBA:
            _K.bias_relu(hid, self.rule.b1)
        else:
            hid += self.rule.b1
            np.maximum(hid, 0.0, out=hid)
        np.dot(hid, self.rule.w2, out=delta)

    def _mlp_rows(self, za, hid, delta):
        k = self.threads
        n = za.shape[0]
        if k == 1 or n < 4 * k:
            self._dense_rows(za, hid, delta)
            return
        if self._pool is None:
            from concurrent.futures import ThreadPoolExecutor

            self._pool = ThreadPoolExecutor(max_workers=k)
        bounds = [n * i // k for i in range(k + 1)]

        def work(i):
            lo, hi = bounds[i], bounds[i + 1]
            self._dense_rows(za[lo:hi], hid[lo:hi], delta[lo:hi])

        list(self._pool.map(work, range(k)))

    def step(self, n: int = 1):
        cfg = self.cfg
        hw = self.h * self.w
        zf = self._z.reshape(hw, cfg.in_dim)
        sf = self.s.reshape(hw, cfg.channels)
        pad_code = self._PAD_CODE[cfg.padding]
        for _ in range(n):
            if cfg.update_rate >= 1.0:
                idx = self._idx_all
            else:
                u = mask_uniform(self.seed, self.t, self.h, self.w).ravel()
                idx = np.flatnonzero(u < np.float32(cfg.update_rate))
            na = idx.size
            if na:
                za, hid, delta = self._za[:na], self._hid[:na], self._delta[:na]
                if self._use_fast:
                    _K.perception_gather(self.s, za, idx, self._cpe_rot,
                                         self._cos, self._sin, pad_code)
                else:
                    self._perception_into_z()
                    np.take(zf, idx, axis=0, out=za)
                self._mlp_rows(za, hid, delta)
                if _K.HAVE_NUMBA:
                    _K.scatter_add(sf, idx, delta)
                else:
                    sf[idx] += delta
            self.t += 1
        return self


# ---------------------------------------------------------------------------
# differentiable step graph (training path)


def rule_tensors(rule: UpdateRule, tape: ad.Tape) -> dict:
    return {
        "w1": ad.param(rule.w1, tape),
        "b1": ad.param(rule.b1, tape),
        "w2": ad.param(rule.w2, tape),
    }


def perception_graph(s: ad.Tensor, cfg: DyncaConfig) -> ad.Tensor:
    """Tape version of perceive_multiscale on a (B, H, W, C) tensor."""
    h, w = s.shape[-3], s.shape[-2]
    total = None
    for sc in cfg.scales:
        level = s if sc == 1 else ad.resize(s, h // sc, w // sc)
        gx = ad.conv3x3(level, SOBEL_X, cfg.padding)
        gy = ad.conv3x3(level, SOBEL_Y, cfg.padding)
        lap = ad.conv3x3(level, LAPLACIAN, cfg.padding)
        z = ad.concat([level, gx, gy, lap], axis=-1)
        if sc != 1:
            z = ad.resize(z, h, w)
        total = z if total is None else total + z
    return total


def step_graph(s: ad.Tensor, rt: dict, cfg: DyncaConfig, masks: np.ndarray,
               cpe: np.ndarray | None = None) -> ad.Tensor:
    """One differentiable step on a batched (B, H, W, C) state tensor.

    `masks` is the precomputed (B, H, W, 1) Bernoulli gate for this step; it
    is treated as a constant during backward.  `cpe` broadcasts over the
    batch.
    """
    b, h, w, c = s.shape
    z = perception_graph(s, cfg)
    if cfg.use_cpe:
        if cpe is None:
            cpe = positional_encoding(h, w, dtype=s.dtype.type)
        cpe_b = np.broadcast_to(cpe, (b, h, w, 2))
        z = ad.concat([z, ad.constant(cpe_b)], axis=-1)
    flat = ad.reshape(z, (b * h * w, cfg.in_dim))
    hid = ad.relu(ad.matmul(flat, rt["w1"]) + rt["b1"])
    delta = ad.reshape(ad.matmul(hid, rt["w2"]), (b, h, w, c))
    return s + delta * ad.constant(masks)


def batch_masks(cfg: DyncaConfig, seed: int, ages: np.ndarray, h: int, w: int) -> np.ndarray:
    """Per-element update gates for one batched step; ages differ per element."""
    return np.stack([update_mask(seed, int(t), h, w, cfg.update_rate) for t in ages])


_UNIT_ROT: dict = {}


def _unit_rotation(h: int, w: int):
    if (h, w) not in _UNIT_ROT:
        _UNIT_ROT[(h, w)] = (np.ones((h, w), dtype=np.float32),
                             np.zeros((h, w), dtype=np.float32))
    return _UNIT_ROT[(h, w)]


def fused_step(s: ad.Tensor, rt: dict, cfg: DyncaConfig, masks: np.ndarray,
               cpe: np.ndarray | None = None) -> ad.Tensor:
    """step_graph collapsed into one tape node with a hand-derived vjp.

    Float32 only, single-scale only; falls back to the compositional graph
    otherwise.  Cuts tape overhead and peak memory roughly in half for the
    unrolled training rollouts.
    """
    if not (_K.HAVE_NUMBA and cfg.scales == (1,) and s.dtype == np.float32):
        return step_graph(s, rt, cfg, masks, cpe)
    b, h, w, c = s.shape
    ind = cfg.in_dim
    w1, b1, w2 = rt["w1"], rt["b1"], rt["w2"]
    cs, sn = _unit_rotation(h, w)
    pad_code = Engine._PAD_CODE[cfg.padding]

    z = np.empty((b, h, w, ind), dtype=np.float32)
    if cfg.use_cpe:
        if cpe is None:
            cpe = positional_encoding(h, w)
        z[..., 4 * c:] = cpe
    for bi in range(b):
        _K.perception_single_scale(s.value[bi], z[bi], cs, sn, pad_code)
    zf = z.reshape(b * h * w, ind)
    hid = zf @ w1.value
    _K.bias_relu(hid, b1.value)
    delta = hid @ w2.value
    out = s.value + delta.reshape(b, h, w, c) * masks

    def vjp(g):
        ddelta = (g * masks).reshape(b * h * w, c)
        dh = ddelta @ w2.value.T
        dw2 = hid.T @ ddelta
        dh *= hid > 0
        dw1 = zf.T @ dh
        db1 = dh.sum(axis=0)
        dz = (dh @ w1.value.T).reshape(b, h, w, ind)
        ds = g.copy()
        for bi in range(b):
            _K.perception_adjoint(dz[bi], ds[bi], pad_code)
        return ds, dw1, db1, dw2

    return ad._record("fused_step", out, (s, w1, b1, w2), vjp)
