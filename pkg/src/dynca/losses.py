"""Training objectives: optimal-transport feature matching for appearance,
direction/magnitude losses against target vector fields, flow-feature
matching against target videos, and the overflow penalty.

Losses take and return autodiff Tensors so they can sit on the training
tape; called outside a tape they evaluate plainly, which is how the
measurement harnesses use them.  Feature extraction and optical flow are
pluggable backends behind small duck-typed classes; the defaults here are
deliberately light desk-scale stand-ins (a seeded random filter bank and a
smoothness-regularized brightness-constancy flow) and can be replaced by
imported filter banks without touching the loss math.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grid import SOBEL_X, SOBEL_Y, PaddingMode

_TINY = 1e-24


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else ad.constant(np.asarray(x))


def _safe_norm_rows(x: Tensor, axis: int = -1) -> Tensor:
    """L2 norm along an axis, differentiable at zero (floor of 1e-12)."""
    return ad.sqrt(ad.tsum(x * x, axis=axis, keepdims=True) + _TINY)


# ---------------------------------------------------------------------------
# optimal-transport feature losses


def _check_widths(x: Tensor, y: Tensor):
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"feature widths differ: {x.shape[-1]} vs {y.shape[-1]}")


def _transpose2(x: Tensor) -> Tensor:
    """2-D transpose as a tape op (reshape cannot express it)."""
    val = x.value.T.copy()

    def vjp(g):
        return (g.T.copy(),)

    return ad._record("transpose", val, (x,), vjp)


def ot_structure(x, y) -> Tensor:
    """Bidirectional min-cosine-distance matching between two feature sets.

    Zero-norm rows normalize to the zero vector, so their cosine distance
    to anything is 1 (maximally uninformative) rather than NaN.
    """
    x, y = _t(x), _t(y)
    _check_widths(x, y)
    xh = x / _safe_norm_rows(x)
    yh = y / _safe_norm_rows(y)
    sim = ad.matmul(xh, _transpose2(yh))
    d_xy = ad.tmean(1.0 - ad.amax(sim, axis=1))
    d_yx = ad.tmean(1.0 - ad.amax(sim, axis=0))
    return ad.maximum(d_xy, d_yx)


def ot_moment(x, y) -> Tensor:
    """First/second-moment matching: L1 distance of means (scaled 1/C) and
    of biased covariance matrices (scaled 1/C^2)."""
    x, y = _t(x), _t(y)
    _check_widths(x, y)
    c = x.shape[-1]
    mx = ad.tmean(x, axis=0, keepdims=True)
    my = ad.tmean(y, axis=0, keepdims=True)
    xc = x - mx
    yc = y - my
    cov_x = ad.matmul(_transpose2(xc), xc) * (1.0 / x.shape[0])
    cov_y = ad.matmul(_transpose2(yc), yc) * (1.0 / y.shape[0])
    term_mu = ad.tsum(ad.absolute(mx - my)) * (1.0 / c)
    term_cov = ad.tsum(ad.absolute(cov_x - cov_y)) * (1.0 / (c * c))
    return term_mu + term_cov


def ot_match(x, y) -> Tensor:
    return ot_structure(x, y) + ot_moment(x, y)


# ---------------------------------------------------------------------------
# appearance


class RandomFeatureExtractor:
    """Five-level pyramid of seeded random 3x3 filter banks with relu.

    Level l runs its bank on the input image bilinearly downsampled by
    2^(l-1); channel widths follow [32, 64, 64, 128, 128].  Deterministic
    for a fixed seed; a fixed stand-in for a pretrained deep feature stack.

    Each bank carries a bias row (the last row of the (28, width) matrix).
    Nonzero biases matter: they keep the relu off its kink for a blank
    input, so appearance gradients exist at the all-zero cold start.
    """

    WIDTHS = (32, 64, 64, 128, 128)
    FAN_IN = 9 * 3

    def __init__(self, seed: int = 0, filters: list | None = None):
        self.levels = len(self.WIDTHS)
        self.seed = seed
        if filters is not None:
            if len(filters) != self.levels:
                raise ValueError(f"expected {self.levels} filter banks, got {len(filters)}")
            filters = [np.asarray(f, dtype=np.float32) for f in filters]
            for f in filters:
                if f.shape[0] != self.FAN_IN + 1:
                    raise ValueError(
                        f"bank rows must be {self.FAN_IN} taps + 1 bias, got {f.shape[0]}")
            self.filters = filters
        else:
            rng = np.random.default_rng(seed)
            scale = np.sqrt(2.0 / self.FAN_IN)
            self.filters = []
            for w in self.WIDTHS:
                bank = np.empty((self.FAN_IN + 1, w), dtype=np.float32)
                bank[:-1] = rng.standard_normal((self.FAN_IN, w)) * scale
                bank[-1] = rng.uniform(-0.3, 0.3, size=w)
                self.filters.append(bank)

    def extract(self, image) -> list[Tensor]:
        """image: (H, W, 3) in [-1, 1].  Returns one (n, C_l) set per level."""
        img = _t(image)
        h, w = img.shape[0], img.shape[1]
        feats = []
        for lvl, bank in enumerate(self.filters):
            f = 2 ** lvl
            lh, lw = max(h // f, 1), max(w // f, 1)
            level = img if (lh, lw) == (h, w) else ad.resize(img, lh, lw)
            taps = ad.unfold3x3(level, PaddingMode.REPLICATE)
            flat = ad.reshape(taps, (lh * lw, taps.shape[-1]))
            weights = ad.constant(bank[:-1].astype(level.dtype.type))
            bias = ad.constant(bank[-1].astype(level.dtype.type))
            feats.append(ad.relu(ad.matmul(flat, weights) + bias))
        return feats


def default_extractor(seed: int = 0) -> RandomFeatureExtractor:
    return RandomFeatureExtractor(seed=seed)


def appearance_loss(frames, target, fx) -> Tensor:
    """Mean over frames of the per-level OT match against the target image."""
    if not frames:
        raise ValueError("need at least one frame")
    target_feats = fx.extract(ad.stop_grad(_t(target)))
    return appearance_loss_from_feats(frames, target_feats, fx)


def appearance_loss_from_feats(frames, target_feats, fx) -> Tensor:
    total = None
    for frame in frames:
        feats = fx.extract(_t(frame))
        for xf, yf in zip(feats, target_feats):
            term = ot_match(xf, yf)
            total = term if total is None else total + term
    return total * (1.0 / len(frames))


# ---------------------------------------------------------------------------
# motion from vector field


def dir_loss(ug, ut) -> Tensor:
    """Mean cosine distance between flows; cells where either vector is zero
    contribute distance 1."""
    ug, ut = _t(ug), _t(ut)
    if ug.shape != ut.shape:
        raise ValueError(f"flow shapes differ: {ug.shape} vs {ut.shape}")
    dot = ad.tsum(ug * ut, axis=-1, keepdims=True)
    ng = _safe_norm_rows(ug)
    nt = _safe_norm_rows(ut)
    valid = (ng.value > 1e-6) & (nt.value > 1e-6)
    cos = ad.where(valid, dot / (ng * nt), ad.constant(np.zeros_like(dot.value)))
    return ad.tmean(1.0 - cos)


def norm_loss(ug, ut, t1: int, t2: int, frame_interval: int) -> Tensor:
    """Mean absolute difference between the time-rescaled synthesized flow
    magnitude and the target magnitude."""
    if t2 <= t1:
        raise ValueError(f"need t2 > t1, got t1={t1}, t2={t2}")
    ug, ut = _t(ug), _t(ut)
    scale = frame_interval / (t2 - t1)
    ng = _safe_norm_rows(ug)
    nt = _safe_norm_rows(ut)
    return ad.tmean(ad.absolute(scale * ng - nt))


def mvec_loss(ug, ut, t1: int, t2: int, frame_interval: int, gamma: float = 1.5) -> Tensor:
    """Direction-first combination: the magnitude term is gated off until
    the direction loss falls below 1."""
    ld = dir_loss(ug, ut)
    ln = norm_loss(ug, ut, t1, t2, frame_interval)
    gate = 1.0 - ad.minimum(ld, 1.0)
    return gate * ln + gamma * ld


# ---------------------------------------------------------------------------
# motion from video


def mvid_loss(gen_pairs, tgt_pairs, flow) -> Tensor:
    """Mean OT match between flow features of consecutive generated frame
    pairs and consecutive target frame pairs."""
    if len(gen_pairs) != len(tgt_pairs):
        raise ValueError(f"pair counts differ: {len(gen_pairs)} vs {len(tgt_pairs)}")
    if not gen_pairs:
        raise ValueError("need at least one frame pair")
    total = None
    for (ga, gb), (ta, tb) in zip(gen_pairs, tgt_pairs):
        xf = flow.features(_t(ga), _t(gb))
        yf = flow.features(ad.stop_grad(_t(ta)), ad.stop_grad(_t(tb)))
        term = ot_match(xf, yf)
        total = term if total is None else total + term
    return total * (1.0 / len(gen_pairs))


# ---------------------------------------------------------------------------
# overflow


def overflow_loss(state) -> Tensor:
    """Mean distance of state entries from the [-1, 1] box; zero inside."""
    s = state if isinstance(state, Tensor) else ad.constant(
        state.grid if hasattr(state, "grid") else np.asarray(state))
    return ad.tmean(ad.absolute(s - ad.clip(s, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# differentiable optical flow


_HS_AVG = np.array([[1 / 12, 1 / 6, 1 / 12],
                    [1 / 6, 0.0, 1 / 6],
                    [1 / 12, 1 / 6, 1 / 12]], dtype=np.float32)
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


class SmoothFlowEstimator:
    """Unrolled fixed-point iterations of the brightness-constancy +
    quadratic-smoothness objective on grayscale frames, initialized
    coarse-to-fine on a bilinear pyramid so that multi-pixel displacements
    stay in the estimator's linear regime.

    Differentiable end to end; identical frames give an exactly zero field
    (every level's iteration starts and stays at zero).  `features` returns
    flattened (u, v, warped-difference) rows for the video motion loss, the
    warped difference being the linearized residual Ix*u + Iy*v + It.
    """

    def __init__(self, iterations: int = 30, smoothness: float = 0.01, levels: int = 3):
        if iterations < 1:
            raise ValueError("need at least one iteration")
        self.iterations = iterations
        self.smoothness = smoothness
        self.levels = levels

    @staticmethod
    def _gray(img: Tensor) -> Tensor:
        if img.shape[-1] == 1:
            return img
        r = img[..., 0:1]
        g = img[..., 1:2]
        b = img[..., 2:3]
        return float(_LUMA[0]) * r + float(_LUMA[1]) * g + float(_LUMA[2]) * b

    def _derivatives(self, ga: Tensor, gb: Tensor):
        avg = (ga + gb) * 0.5
        ix = ad.conv3x3(avg, SOBEL_X, PaddingMode.REPLICATE)
        iy = ad.conv3x3(avg, SOBEL_Y, PaddingMode.REPLICATE)
        it = gb - ga
        return ix, iy, it

    def _iterate(self, u, v, ix, iy, it):
        denom = ix * ix + iy * iy + self.smoothness
        for _ in range(self.iterations):
            uv = ad.concat([u, v], axis=-1)
            uv_bar = ad.conv3x3(uv, _HS_AVG, PaddingMode.REPLICATE)
            ub = uv_bar[..., 0:1]
            vb = uv_bar[..., 1:2]
            p = (ix * ub + iy * vb + it) / denom
            u = ub - ix * p
            v = vb - iy * p
        return u, v

    def _solve(self, a, b):
        ga, gb = self._gray(_t(a)), self._gray(_t(b))
        h, w = ga.shape[-3], ga.shape[-2]
        # level scale factors, coarsest first, keeping grids at least 8 wide
        factors = []
        for lvl in reversed(range(self.levels)):
            f = 2 ** lvl
            if min(h, w) // f >= 8 or f == 1:
                factors.append(f)
        u = v = None
        ix = iy = it = None
        for f in factors:
            lh, lw = h // f, w // f
            la = ga if f == 1 else ad.resize(ga, lh, lw)
            lb = gb if f == 1 else ad.resize(gb, lh, lw)
            ix, iy, it = self._derivatives(la, lb)
            if u is None:
                dtype = ix.dtype.type
                u = ad.constant(np.zeros(ix.shape, dtype=dtype))
                v = ad.constant(np.zeros(ix.shape, dtype=dtype))
            else:
                # upsample the coarse estimate; displacements double per level
                u = ad.resize(u, lh, lw) * 2.0
                v = ad.resize(v, lh, lw) * 2.0
            u, v = self._iterate(u, v, ix, iy, it)
        return u, v, ix, iy, it

    def estimate(self, a, b) -> Tensor:
        """(..., H, W, 2) flow in pixels, frame a -> frame b.  Leading batch
        axes are supported and solved jointly."""
        u, v, _, _, _ = self._solve(a, b)
        return ad.concat([u, v], axis=-1)

    def features(self, a, b) -> Tensor:
        """Flattened (u, v, residual) rows for one frame pair."""
        u, v, ix, iy, it = self._solve(a, b)
        if len(u.shape) != 3:
            raise ValueError("features() wants a single (H, W, C) frame pair")
        resid = ix * u + iy * v + it
        stack = ad.concat([u, v, resid], axis=-1)
        h, w = stack.shape[0], stack.shape[1]
        return ad.reshape(stack, (h * w, 3))


def default_flow(iterations: int = 30, smoothness: float = 0.01, levels: int = 3) -> SmoothFlowEstimator:
    return SmoothFlowEstimator(iterations=iterations, smoothness=smoothness, levels=levels)
