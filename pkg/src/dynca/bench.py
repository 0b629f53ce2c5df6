"""Throughput harness: timed steps, derived FPS, one-line record plus a
human table.  Numbers are always measured, never estimated."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from .core import DyncaConfig, Engine, UpdateRule


@dataclass
class BenchReport:
    config_id: str
    height: int
    width: int
    frame_interval: int
    warmup_steps: int
    timed_steps: int
    steps_per_sec: float
    fps: float
    ms_per_step: float


def run_bench(cfg: DyncaConfig, rule: UpdateRule | None = None, h: int | None = None,
              w: int | None = None, config_id: str = "custom", warmup: int = 50,
              steps: int = 500, threads: int = 1, seed: int = 0) -> BenchReport:
    """Warm up, then time `steps` engine steps on a live (non-blank) state."""
    if rule is None:
        rule = UpdateRule.create(cfg, seed=seed)
        rng = np.random.default_rng(seed + 1)
        rule.w2[:] = rng.standard_normal(rule.w2.shape).astype(np.float32) * 0.05
    eng = Engine(cfg, rule, h, w, seed=seed, threads=threads)
    eng.step(warmup)
    t0 = time.perf_counter()
    eng.step(steps)
    dt = time.perf_counter() - t0
    sps = steps / dt
    return BenchReport(
        config_id=config_id,
        height=eng.h,
        width=eng.w,
        frame_interval=cfg.frame_interval,
        warmup_steps=warmup,
        timed_steps=steps,
        steps_per_sec=sps,
        fps=sps / cfg.frame_interval,
        ms_per_step=1000.0 / sps,
    )


def report_record(r: BenchReport) -> str:
    return json.dumps(asdict(r))


def report_table(r: BenchReport) -> str:
    rows = [
        ("config", r.config_id),
        ("grid", f"{r.height}x{r.width}"),
        ("steps/frame", str(r.frame_interval)),
        ("steps/s", f"{r.steps_per_sec:.1f}"),
        ("FPS", f"{r.fps:.2f}"),
        ("ms/step", f"{r.ms_per_step:.3f}"),
        ("timed steps", str(r.timed_steps)),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)
