"""The training recipe: checkpoint pool, epoch loops for vector-field and
video motion, loss weighting and annealing, the learning-rate schedule, and
checkpoint serialization.

One epoch samples a batch of persisted states from the pool, evolves them a
random number of steps on the autodiff tape, evaluates appearance + motion
+ overflow objectives, backpropagates through the whole unrolled rollout,
normalizes each layer's gradient to unit L2, applies Adam, and returns the
evolved states to the pool.  Every random draw derives from one root seed,
so runs are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import core
from . import losses as LO
from .core import DyncaConfig, NcaState, UpdateRule
from .fields import FieldKind, generate_field
from .weights import load_rule, save_rule

AGE_CAP = 10 ** 6


# ---------------------------------------------------------------------------
# checkpoint pool


class CheckpointPool:
    """Reservoir of evolved states reused across epochs.

    Entries persist their age (total steps since seed).  Every
    `reseed_period` epochs one entry is replaced by the fresh seed so the
    rule keeps seeing the start of its own trajectory.
    """

    def __init__(self, cfg: DyncaConfig, h: int, w: int, capacity: int = 256,
                 reseed_period: int = 8):
        if capacity < 1:
            raise ValueError("pool capacity must be >= 1")
        self.cfg = cfg
        self.h, self.w = h, w
        self.capacity = capacity
        self.reseed_period = reseed_period
        self.states = [core.make_seed(cfg, h, w).grid for _ in range(capacity)]
        self.ages = np.zeros(capacity, dtype=np.int64)
        self.checked_out: set[int] = set()
        self.reseed_events = 0

    def __len__(self):
        return self.capacity

    def sample(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform sample of `batch` distinct entries; marks them checked out."""
        free = [i for i in range(self.capacity) if i not in self.checked_out]
        if batch > len(free):
            raise ValueError(f"batch {batch} exceeds available pool entries {len(free)}")
        idx = rng.choice(len(free), size=batch, replace=False)
        chosen = np.array([free[i] for i in idx], dtype=np.int64)
        self.checked_out.update(int(i) for i in chosen)
        return chosen

    def put_back(self, idx: np.ndarray, grids: np.ndarray, ages: np.ndarray):
        for k, i in enumerate(idx):
            i = int(i)
            if i not in self.checked_out:
                raise ValueError(f"entry {i} was not checked out")
            self.states[i] = np.ascontiguousarray(grids[k])
            self.ages[i] = min(int(ages[k]), AGE_CAP)
            self.checked_out.discard(i)

    def maybe_reseed(self, epoch: int, rng: np.random.Generator):
        """Once every reseed_period epochs, replace one entry with the seed."""
        if (epoch + 1) % self.reseed_period != 0:
            return
        free = [i for i in range(self.capacity) if i not in self.checked_out]
        i = free[int(rng.integers(len(free)))]
        self.states[i] = core.make_seed(self.cfg, self.h, self.w).grid
        self.ages[i] = 0
        self.reseed_events += 1


# ---------------------------------------------------------------------------
# plan / targets


def lr_at(epoch: int, base_lr: float = 1e-3) -> float:
    """Initial rate, multiplied by 0.3 at epochs 1000 and 2000."""
    k = (epoch >= 1000) + (epoch >= 2000)
    return base_lr * 0.3 ** k


@dataclass
class TrainPlan:
    mode: str = "vec"  # vec | video | style
    epochs: int = 4000
    base_lr: float = 1e-3
    batch: int | None = None          # default 4, or 3 for 256+ seeds
    gamma: float = 1.5
    overflow_weight: float | None = None  # default 100.0 vec, 1.0 video/style
    lam: float | None = None          # motion weight; None = anneal (vec) / auto (video)
    steps_range: tuple | None = None  # default (32, 128) vec, (80, 144) video
    pool_capacity: int = 256
    appearance_frame_cap: int = 4     # max frames per epoch fed to the appearance term
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("vec", "video", "style"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.overflow_weight is None:
            self.overflow_weight = 100.0 if self.mode == "vec" else 1.0
        if self.steps_range is None:
            self.steps_range = (32, 128) if self.mode == "vec" else (80, 144)

    def resolve_batch(self, h: int, w: int) -> int:
        if self.batch is not None:
            return self.batch
        return 3 if max(h, w) >= 256 else 4


@dataclass
class TargetSpec:
    appearance: np.ndarray                      # (H, W, 3) in [-1, 1]
    motion_kind: FieldKind | None = None        # analytic field target
    motion_field: np.ndarray | None = None      # explicit (H, W, 2) target
    motion_video: list | None = None            # ordered (H, W, 3) frames
    lambda_override: float | None = None

    def field_for(self, h: int, w: int) -> np.ndarray:
        if self.motion_field is not None:
            if self.motion_field.shape[:2] != (h, w):
                raise ValueError(
                    f"motion field is {self.motion_field.shape[:2]}, grid is {(h, w)}")
            return self.motion_field
        if self.motion_kind is None:
            raise ValueError("no vector-field motion target configured")
        return generate_field(self.motion_kind, h, w)

    def validate_for(self, mode: str):
        if mode == "vec" and self.motion_kind is None and self.motion_field is None:
            raise ValueError("vector-field mode needs a field target")
        if mode in ("video", "style"):
            if not self.motion_video or len(self.motion_video) < 2:
                raise ValueError("video motion needs at least 2 target frames")


# ---------------------------------------------------------------------------
# lambda automation


def lambda_from_median(median: float, seed_size: int) -> float:
    """Affine map from the probe-phase median motion loss to the training
    weight; clamped below at 0.05 because the raw map can go non-positive."""
    if seed_size >= 256:
        lam = 6.04 * median - 2.17
    else:
        lam = 5.82 * median - 1.05
    return max(lam, 0.05)


def anneal_lambda_vec(lam0: float, history: list[float]) -> float:
    """Scale the initial motion weight by how far the appearance loss has
    come down; never exceeds the initial weight."""
    if not history:
        raise ValueError("appearance history is empty")
    ratio = history[-1] / history[0] if history[0] > 0 else 1.0
    return lam0 * min(1.0, ratio)


# ---------------------------------------------------------------------------
# objectives (dependency-injectable for dry runs)


class ObjectivesBase:
    """Shared appearance/overflow machinery for both motion modes.

    The structure term of the OT match runs on a seeded row subsample when
    a feature level is larger than `structure_rows` (the moment term always
    sees the full set); this keeps the pairwise cosine matrix affordable at
    training resolutions without touching the loss formulas.
    """

    def __init__(self, target: TargetSpec, fx=None, flow=None,
                 structure_rows: int = 1024, seed: int = 0):
        self.target = target
        self.fx = fx if fx is not None else LO.default_extractor(seed=0)
        self.flow = flow if flow is not None else LO.default_flow()
        self.structure_rows = structure_rows
        self.rng = np.random.default_rng(seed)
        self.target_frame_interval = 24  # overwritten by the trainer
        self._target_feats = None

    def _feats(self):
        if self._target_feats is None:
            self._target_feats = [ad.stop_grad(f) for f in
                                  self.fx.extract(ad.constant(self.target.appearance))]
        return self._target_feats

    def _ot_subsampled(self, xf, yf):
        cap = self.structure_rows
        xs = xf if xf.shape[0] <= cap else ad.take_rows(xf, self.rng.choice(xf.shape[0], cap, replace=False))
        ys = yf if yf.shape[0] <= cap else ad.take_rows(yf, self.rng.choice(yf.shape[0], cap, replace=False))
        return LO.ot_structure(xs, ys) + LO.ot_moment(xf, yf)

    def appearance(self, frames) -> ad.Tensor:
        if not frames:
            raise ValueError("no frames emitted for the appearance loss")
        total = None
        for frame in frames:
            for xf, yf in zip(self.fx.extract(frame), self._feats()):
                term = self._ot_subsampled(xf, yf)
                total = term if total is None else total + term
        return total * (1.0 / len(frames))

    def overflow(self, s: ad.Tensor) -> ad.Tensor:
        return LO.overflow_loss(s)


class VecObjectives(ObjectivesBase):
    """Appearance + vector-field motion + overflow."""

    def __init__(self, target: TargetSpec, gamma: float = 1.5, **kw):
        super().__init__(target, **kw)
        self.gamma = gamma
        self._fields = {}

    def _field(self, h, w):
        if (h, w) not in self._fields:
            self._fields[(h, w)] = self.target.field_for(h, w)
        return self._fields[(h, w)]

    def motion(self, start_imgs: ad.Tensor, end_imgs: ad.Tensor,
               t1s: np.ndarray, delta: int) -> ad.Tensor:
        """start/end: (B, H, W, 3) tensors; one mvec term per element,
        flow solved jointly over the batch."""
        b, h, w = start_imgs.shape[0], start_imgs.shape[1], start_imgs.shape[2]
        ut = ad.constant(self._field(h, w))
        flows = self.flow.estimate(start_imgs, end_imgs)
        total = None
        for bi in range(b):
            term = LO.mvec_loss(flows[bi], ut, int(t1s[bi]), int(t1s[bi]) + delta,
                                self.target_frame_interval, self.gamma)
            total = term if total is None else total + term
        return total * (1.0 / b)


class VideoObjectives(ObjectivesBase):
    """Appearance + video motion + overflow."""

    def motion(self, gen_pairs: list) -> ad.Tensor:
        """gen_pairs: list of (frame_a, frame_b) tensors, one per element;
        each is matched against a random consecutive target pair."""
        video = self.target.motion_video
        total = None
        for ga, gb in gen_pairs:
            k = int(self.rng.integers(len(video) - 1))
            term = LO.mvid_loss([(ga, gb)], [(video[k], video[k + 1])], self.flow)
            total = term if total is None else total + term
        return total * (1.0 / len(gen_pairs))


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    """Owns the rule, pool, optimizer, and the seeded random streams."""

    def __init__(self, cfg: DyncaConfig, plan: TrainPlan, target: TargetSpec,
                 h: int | None = None, w: int | None = None, objectives=None):
        target.validate_for(plan.mode)
        self.cfg = cfg
        self.plan = plan
        self.target = target
        self.h = cfg.seed_h if h is None else h
        self.w = cfg.seed_w if w is None else w
        self.batch = plan.resolve_batch(self.h, self.w)
        self.rule = UpdateRule.create(cfg, seed=plan.seed)
        self.pool = CheckpointPool(cfg, self.h, self.w, capacity=plan.pool_capacity)
        self.rng = np.random.default_rng(plan.seed)
        self.adam = ad.AdamState(lr=plan.base_lr)
        self.cpe = core.positional_encoding(self.h, self.w) if cfg.use_cpe else None
        if objectives is not None:
            self.objectives = objectives
        elif plan.mode == "vec":
            self.objectives = VecObjectives(target, gamma=plan.gamma, seed=plan.seed)
        else:
            self.objectives = VideoObjectives(target, seed=plan.seed)
        if hasattr(self.objectives, "target_frame_interval"):
            self.objectives.target_frame_interval = cfg.frame_interval
        # motion weight state
        if plan.mode == "vec":
            self.lam0 = 10.0 if plan.lam is None else plan.lam
            self.lam = self.lam0
        else:
            self.lam = plan.lam if plan.lam is not None else target.lambda_override
        self.appearance_history: list[float] = []
        self.epoch_index = 0
        self.overflow_terms = 0

    # -- epoch bodies -------------------------------------------------------

    def _rollout_graph(self, states, ages, n_steps, collect_frames=True):
        """Unrolled differentiable rollout; returns (rule tensors, final
        state tensor, emitted frame tensors, tape, relative frame marks)."""
        tape = ad.Tape().__enter__()
        rt = core.rule_tensors(self.rule, tape)
        s = ad.constant(states)
        frames = []
        cur = ages.copy()
        for _ in range(n_steps):
            masks = core.batch_masks(self.cfg, self.plan.seed, cur, self.h, self.w)
            s = core.fused_step(s, rt, self.cfg, masks, self.cpe)
            cur += 1
            if collect_frames:
                for b in range(len(cur)):
                    if cur[b] % self.cfg.frame_interval == 0:
                        frames.append(s[b, :, :, :3])
        return tape, rt, s, frames

    def _optimize(self, tape, rt, loss):
        ad.backward(tape, loss)
        tape.__exit__(None, None, None)
        grads = {k: t.grad for k, t in rt.items()}
        grads = ad.normalize_gradients(grads)
        self.adam.lr = lr_at(self.epoch_index, self.plan.base_lr)
        ad.adam_step(self.rule.params(), grads, self.adam)

    def draw_steps(self) -> int:
        """Per-epoch step count, uniform over the inclusive plan range."""
        lo, hi = self.plan.steps_range
        return int(self.rng.integers(lo, hi + 1))

    def epoch_vec(self) -> dict:
        plan = self.plan
        delta = self.draw_steps()
        idx = self.pool.sample(self.batch, self.rng)
        states = np.stack([self.pool.states[int(i)] for i in idx])
        t1s = self.ages_of(idx)

        tape, rt, s, frames = self._rollout_graph(states, t1s.copy(), delta)
        try:
            cap = self.plan.appearance_frame_cap
            if cap and len(frames) > cap:
                keep = sorted(self.rng.choice(len(frames), cap, replace=False))
                frames = [frames[i] for i in keep]
            start_imgs = ad.constant(states[..., :3])
            end_imgs = s[:, :, :, :3]
            l_appr = self.objectives.appearance(frames)
            l_mot = self.objectives.motion(start_imgs, end_imgs, t1s, delta)
            l_over = self.objectives.overflow(s)
            self.overflow_terms += 1
            loss = l_appr + self.lam * l_mot + plan.overflow_weight * l_over
        except BaseException:
            tape.__exit__(None, None, None)
            raise
        self._optimize(tape, rt, loss)

        self.pool.put_back(idx, s.value, t1s + delta)
        self.pool.maybe_reseed(self.epoch_index, self.rng)
        metrics = self._metrics(l_appr, l_mot, l_over)
        self.appearance_history.append(metrics["loss_appearance"])
        if plan.lam is None:
            self.lam = anneal_lambda_vec(self.lam0, self.appearance_history)
        self.epoch_index += 1
        return metrics

    def epoch_video(self) -> dict:
        plan, cfg = self.plan, self.cfg
        if self.lam is None:
            raise ValueError("video mode needs a motion weight (auto_lambda or override)")
        lo, hi = plan.steps_range
        t_int = cfg.frame_interval
        if lo <= t_int:
            raise ValueError(
                f"per-epoch step minimum {lo} must exceed the frame interval {t_int}")
        n = self.draw_steps()
        idx = self.pool.sample(self.batch, self.rng)
        states = np.stack([self.pool.states[int(i)] for i in idx])
        t1s = self.ages_of(idx)

        tape = ad.Tape().__enter__()
        try:
            rt = core.rule_tensors(self.rule, tape)
            s = ad.constant(states)
            early = None  # state at relative step n - frame_interval
            cur = t1s.copy()
            for k in range(n):
                masks = core.batch_masks(self.cfg, plan.seed, cur, self.h, self.w)
                s = core.fused_step(s, rt, self.cfg, masks, self.cpe)
                cur += 1
                if k == n - t_int - 1:
                    early = s
            gen_pairs = [(early[b, :, :, :3], s[b, :, :, :3]) for b in range(self.batch)]
            frames = [img for pair in gen_pairs for img in pair]
            l_appr = self.objectives.appearance(frames)
            l_mot = self.objectives.motion(gen_pairs)
            l_over = self.objectives.overflow(s)
            self.overflow_terms += 1
            loss = l_appr + self.lam * l_mot + plan.overflow_weight * l_over
        except BaseException:
            tape.__exit__(None, None, None)
            raise
        self._optimize(tape, rt, loss)

        self.pool.put_back(idx, s.value, t1s + n)
        self.pool.maybe_reseed(self.epoch_index, self.rng)
        metrics = self._metrics(l_appr, l_mot, l_over)
        self.appearance_history.append(metrics["loss_appearance"])
        self.epoch_index += 1
        return metrics

    def epoch(self) -> dict:
        return self.epoch_vec() if self.plan.mode == "vec" else self.epoch_video()

    def _metrics(self, l_appr, l_mot, l_over) -> dict:
        return {
            "epoch": self.epoch_index,
            "lr": lr_at(self.epoch_index, self.plan.base_lr),
            "loss_appearance": float(l_appr.value),
            "loss_motion": float(l_mot.value),
            "loss_overflow": float(l_over.value),
            "lambda": float(self.lam),
        }

    def ages_of(self, idx) -> np.ndarray:
        return np.array([self.pool.ages[int(i)] for i in idx], dtype=np.int64)

    def run(self, epochs: int | None = None, log=None) -> UpdateRule:
        for _ in range(self.plan.epochs if epochs is None else epochs):
            m = self.epoch()
            if log is not None:
                log(m)
        return self.rule

    def reinitialize(self):
        """Fresh rule, pool, optimizer, and random streams (same seeds)."""
        self.rule = UpdateRule.create(self.cfg, seed=self.plan.seed)
        self.pool = CheckpointPool(self.cfg, self.h, self.w, capacity=self.plan.pool_capacity)
        self.adam = ad.AdamState(lr=self.plan.base_lr)
        self.rng = np.random.default_rng(self.plan.seed)
        self.appearance_history = []
        self.epoch_index = 0
        self.overflow_terms = 0


def auto_lambda(trainer: Trainer, probe_epochs: int = 1000, probe_lam: float = 5.0,
                log=None) -> float:
    """Probe phase for video mode: train with an empirical motion weight,
    take the median motion loss, map it through the seed-size-specific
    affine rule, then reset the trainer for the real run."""
    if trainer.plan.mode not in ("video", "style"):
        raise ValueError("auto_lambda applies to video-motion training")
    trainer.lam = probe_lam
    medians = []
    for _ in range(probe_epochs):
        m = trainer.epoch_video()
        medians.append(m["loss_motion"])
        if log is not None:
            log(m)
    lam = lambda_from_median(float(np.median(medians)), max(trainer.h, trainer.w))
    trainer.reinitialize()
    trainer.lam = lam
    return lam


# ---------------------------------------------------------------------------
# measurement harness


def measure_motion(rule: UpdateRule, cfg: DyncaConfig, target_field: np.ndarray,
                   h: int, w: int, seed: int = 0, warmup_frames: int = 30,
                   pairs: int = 4, flow=None):
    """Synthesize from the seed and measure the flow on consecutive
    frame-interval pairs against the target field.

    Returns (mean cosine similarity, norm loss at interval scale), averaged
    over `pairs` consecutive frame pairs after the warmup.
    """
    flow = flow if flow is not None else LO.default_flow()
    eng = core.Engine(cfg, rule, h, w, seed=seed)
    t_int = cfg.frame_interval
    eng.step(warmup_frames * t_int)
    imgs = [eng.s[..., :3].copy()]
    for _ in range(pairs):
        eng.step(t_int)
        imgs.append(eng.s[..., :3].copy())
    cos_vals, norm_vals = [], []
    for a, b in zip(imgs[:-1], imgs[1:]):
        uv = flow.estimate(a, b)
        cos_vals.append(1.0 - float(LO.dir_loss(uv, target_field).value))
        norm_vals.append(float(LO.norm_loss(uv, target_field, 0, t_int, t_int).value))
    return float(np.mean(cos_vals)), float(np.mean(norm_vals))


# ---------------------------------------------------------------------------
# checkpointing (DYNC container)


def save_checkpoint(path, rule: UpdateRule, cfg: DyncaConfig) -> None:
    save_rule(path, rule, cfg)


def load_checkpoint(path):
    return load_rule(path)
