"""Acceptance criteria, one test per criterion, at pinned tolerances.

Criterion 8 trains a real model at desk scale (several minutes); its
checkpoint feeds criterion 11.  Run `pytest -v tests/test_acceptance.py`
for the per-criterion pass/fail lines.
"""

import json

import numpy as np
import pytest

from dynca import autodiff as ad
from dynca import core
from dynca import losses as LO
from dynca import trainer as TR
from dynca.bench import run_bench
from dynca.controls import brush_erase
from dynca.core import DyncaConfig, Engine, UpdateRule, make_seed, preset, update_mask
from dynca.fields import FIELD_NAMES, FieldKind, generate_field


def periodic_texture(h, w):
    """High-contrast periodic appearance target with two pattern scales."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    a = np.sign(np.sin(2 * np.pi * xx / 16) * np.sin(2 * np.pi * yy / 16))
    b = np.sin(2 * np.pi * (xx + yy) / 8)
    return np.stack([a * 0.8, b * 0.7, (a * b) * 0.6], axis=-1).astype(np.float32)


def test_c01_parameter_counts():
    assert core.parameter_count(preset("S")) == 6048
    assert core.parameter_count(preset("L")) == 10624


def test_c02_vector_field_catalog():
    for name in FIELD_NAMES:
        for size in (64, 128, 256):
            f = generate_field(name, size, size)
            mean_norm = np.sqrt((f.astype(np.float64) ** 2).sum(-1)).mean()
            assert abs(mean_norm - 1.0) < 1e-5, (name, size, mean_norm)
    for size in (64, 128, 256):
        d = generate_field(FieldKind.DIVERGE, size, size)
        c = generate_field(FieldKind.CONVERGE, size, size)
        np.testing.assert_array_equal(d, -c)


def test_c03_loss_identities():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 12))
        c = int(rng.integers(2, 6))
        x = rng.standard_normal((n, c)).astype(np.float32)
        assert abs(float(LO.ot_structure(x, x).value)) < 1e-6
        assert abs(float(LO.ot_moment(x, x).value)) < 1e-6

        h = int(rng.integers(2, 7))
        u = rng.standard_normal((h, h, 2)).astype(np.float32)
        assert abs(float(LO.dir_loss(u, u).value)) < 1e-6

        s = rng.standard_normal((h, h, 3)).astype(np.float32) * 3
        clipped = np.clip(s, -1, 1)
        assert float(LO.overflow_loss(clipped).value) <= 1e-6

        # gate: orthogonal fields make the direction loss >= 1 exactly
        ug = np.zeros((h, h, 2), dtype=np.float32)
        ut = np.zeros((h, h, 2), dtype=np.float32)
        ug[..., 1] = rng.uniform(0.5, 2.0, size=(h, h))
        ut[..., 0] = rng.uniform(0.5, 2.0, size=(h, h))
        ld = float(LO.dir_loss(ug, ut).value)
        assert ld >= 1.0 - 1e-6
        gamma = 1.5
        mv = float(LO.mvec_loss(ug, ut, 0, 24, 24, gamma).value)
        assert abs(mv - gamma * ld) < 1e-6


def _mvec_pipeline(w1v, b1v, w2v, cfg, state0, ut, steps, flow):
    """Shared builder for the gradient-fidelity pipeline; dtype follows
    the parameter arrays."""
    rt = {"w1": ad.param(w1v), "b1": ad.param(b1v), "w2": ad.param(w2v)}
    s = ad.constant(state0.astype(w1v.dtype)[None])
    start = ad.constant(state0.astype(w1v.dtype)[None, :, :, :3])
    ages = np.array([0])
    for t in range(steps):
        masks = core.batch_masks(cfg, 0, ages + t, state0.shape[0], state0.shape[1])
        s = core.step_graph(s, rt, cfg, masks)
    uv = flow.estimate(start[0], s[0, :, :, :3])
    loss = LO.mvec_loss(uv, ad.constant(ut.astype(w1v.dtype)), 0, steps, cfg.frame_interval, 1.5)
    return rt, loss


def test_c04_gradient_fidelity():
    cfg = DyncaConfig(channels=4, hidden_width=8, seed_h=8, seed_w=8,
                      update_rate=1.0, frame_interval=24)
    rng = np.random.default_rng(1)
    rule = UpdateRule.create(cfg, seed=2)
    rule.w2[:] = rng.standard_normal(rule.w2.shape).astype(np.float32) * 0.2
    state0 = rng.standard_normal((8, 8, 4)).astype(np.float32) * 0.3
    ut = generate_field(FieldKind.RIGHT, 8, 8)
    flow = LO.default_flow()
    steps = 16

    with ad.Tape() as tape:
        rt, loss = _mvec_pipeline(rule.w1, rule.b1, rule.w2, cfg, state0, ut, steps, flow)
        ad.backward(tape, loss)
        grads = {k: t.grad.copy() for k, t in rt.items()}

    def forward(w1v, b1v, w2v):
        _, l = _mvec_pipeline(w1v, b1v, w2v, cfg, state0, ut, steps, flow)
        return float(l.value)

    # f64 oracle; eps small enough that the secant cannot straddle a relu
    # kink (at 1e-4 a few probes land within eps of a boundary and the
    # one-sided FD value is off by ~1e-2 even though the gradient is exact)
    params64 = {"w1": rule.w1.astype(np.float64), "b1": rule.b1.astype(np.float64),
                "w2": rule.w2.astype(np.float64)}
    eps = 1e-6
    probes = []
    names = list(params64)
    for _ in range(50):
        name = names[int(rng.integers(len(names)))]
        flat = int(rng.integers(params64[name].size))
        probes.append((name, flat))
    for name, flat in probes:
        pos = np.unravel_index(flat, params64[name].shape)
        args = {k: v.copy() for k, v in params64.items()}
        args[name][pos] += eps
        f_plus = forward(args["w1"], args["b1"], args["w2"])
        args[name][pos] -= 2 * eps
        f_minus = forward(args["w1"], args["b1"], args["w2"])
        fd = (f_plus - f_minus) / (2 * eps)
        got = grads[name][pos]
        denom = max(abs(fd), abs(got), 1e-5)
        assert abs(got - fd) / denom < 1e-3, f"{name}{pos}: ad={got} fd={fd}"


def test_c05_determinism_1000_steps():
    cfg = preset("S")
    rule = UpdateRule.create(cfg, seed=3)
    rule.w2[:] = np.random.default_rng(4).standard_normal(rule.w2.shape).astype(np.float32) * 0.05

    def run(threads):
        eng = Engine(cfg, rule, 128, 128, seed=77, threads=threads)
        eng.step(1000)
        return eng.s.tobytes()

    a = run(1)
    b = run(1)
    c = run(4)
    assert a == b, "reruns diverged"
    assert a == c, "thread counts diverged"


def test_c06_mask_rate():
    total, n = 0.0, 0
    for t in range(16):
        m = update_mask(2024, t, 250, 250, 0.5)
        total += m.sum()
        n += m.size
    assert n >= 1_000_000
    assert abs(total / n - 0.5) < 0.01


def test_c07_training_schedule_conformance():
    class Stub:
        overflow_calls = 0
        target_frame_interval = 24

        def appearance(self, frames):
            return ad.constant(np.float32(1.0))

        def motion(self, *a, **k):
            return ad.constant(np.float32(1.0))

        def overflow(self, s):
            Stub.overflow_calls += 1
            return ad.constant(np.float32(0.0))

    cfg = DyncaConfig(channels=4, hidden_width=8, seed_h=16, seed_w=16,
                      frame_interval=4)
    plan = TR.TrainPlan(mode="vec", epochs=4000, steps_range=(1, 1), batch=2,
                        pool_capacity=8, seed=0)
    target = TR.TargetSpec(appearance=periodic_texture(16, 16),
                           motion_kind=FieldKind.RIGHT)
    tr = TR.Trainer(cfg, plan, target, objectives=Stub())
    lrs = []
    for _ in range(4000):
        lrs.append(tr.epoch()["lr"])
    assert lrs[0] == pytest.approx(1e-3)
    assert lrs[999] == pytest.approx(1e-3)
    assert lrs[1000] == pytest.approx(3e-4, rel=1e-6)
    assert lrs[1999] == pytest.approx(3e-4, rel=1e-6)
    assert lrs[2000] == pytest.approx(9e-5, rel=1e-6)
    assert lrs[3999] == pytest.approx(9e-5, rel=1e-6)
    assert sorted(set(round(l, 10) for l in lrs)) == sorted(
        {round(1e-3, 10), round(3e-4, 10), round(9e-5, 10)})
    assert tr.pool.reseed_events == 500
    assert Stub.overflow_calls == 4000


@pytest.fixture(scope="session")
def trained_right(tmp_path_factory):
    """Criterion 8 training run; the checkpoint also feeds criterion 11."""
    cfg = preset("S", frame_interval=24)
    target = TR.TargetSpec(appearance=periodic_texture(64, 64),
                           motion_kind=FieldKind.RIGHT)
    plan = TR.TrainPlan(mode="vec", seed=0)
    tr = TR.Trainer(cfg, plan, target, h=64, w=64)
    field = generate_field(FieldKind.RIGHT, 64, 64)
    epochs = 0
    for _ in range(2000):
        tr.epoch()
        epochs += 1
        if epochs >= 300 and epochs % 50 == 0:
            cos, ln = TR.measure_motion(tr.rule, cfg, field, 64, 64,
                                        warmup_frames=10, pairs=3)
            if cos >= 0.88 and ln <= 0.4:
                break
    path = tmp_path_factory.mktemp("ckpt") / "right64.dync"
    TR.save_checkpoint(path, tr.rule, cfg)
    return tr.rule, cfg, epochs


@pytest.mark.slow
def test_c08_desk_scale_motion_learning(trained_right):
    rule, cfg, epochs = trained_right
    assert epochs <= 2000
    field = generate_field(FieldKind.RIGHT, 64, 64)
    cos, ln = TR.measure_motion(rule, cfg, field, 64, 64, seed=123,
                                warmup_frames=30, pairs=4)
    print(f"\n[criterion 8] epochs={epochs} cosine={cos:.3f} norm_loss={ln:.3f}")
    assert cos >= 0.8
    assert ln <= 0.5


def test_c09_auto_lambda_formulas():
    assert TR.lambda_from_median(1.0, 128) == pytest.approx(5.82 * 1.0 - 1.05, abs=1e-12)
    assert TR.lambda_from_median(1.0, 256) == pytest.approx(6.04 * 1.0 - 2.17, abs=1e-12)
    for m in (0.3, 0.77, 1.9, 4.2):
        assert TR.lambda_from_median(m, 128) == pytest.approx(max(5.82 * m - 1.05, 0.05), abs=1e-12)
        assert TR.lambda_from_median(m, 256) == pytest.approx(max(6.04 * m - 2.17, 0.05), abs=1e-12)


@pytest.mark.slow
def test_c10_throughput_floor():
    cfg = preset("S", frame_interval=24)
    report = run_bench(cfg, h=128, w=128, config_id="S", warmup=50, steps=500)
    print(f"\n[criterion 10] steps/s={report.steps_per_sec:.1f} "
          f"fps={report.fps:.2f} ms/step={report.ms_per_step:.3f}")
    assert report.steps_per_sec >= 240.0
    assert report.ms_per_step * report.steps_per_sec == pytest.approx(1000.0, rel=0.01)
    assert report.fps == pytest.approx(report.steps_per_sec / 24, rel=1e-6)


@pytest.mark.slow
def test_local_transform_bends_right_into_circulation(trained_right):
    """Controls harness on the trained model: the arctan coordinate map
    turns the learned rightward motion into rotation around the center
    (positive curl in the conventional y-up orientation, an order of
    magnitude above the untransformed model's residual curl)."""
    from dynca.controls import ControlState, apply_controls, set_local_transform

    rule, cfg, _ = trained_right
    flow = LO.default_flow()

    def measured_curl(transform: bool) -> float:
        eng = Engine(cfg, rule, 64, 64, seed=5)
        if transform:
            ctrl = ControlState(t_live=cfg.frame_interval)
            set_local_transform(ctrl, "circular_from_right", 64, 64)
            apply_controls(eng, ctrl)
        eng.step(24 * 30)
        a = eng.s[..., :3].copy()
        eng.step(24)
        b = eng.s[..., :3].copy()
        uv = flow.estimate(a, b).value.astype(np.float64)
        u, v = uv[..., 0], uv[..., 1]
        dv_dx = (v[1:-1, 2:] - v[1:-1, :-2]) / 2
        du_dy = (u[2:, 1:-1] - u[:-2, 1:-1]) / 2
        # y-up orientation: negate the image-coordinate curl
        return float(-(dv_dx - du_dy).sum())

    curled = measured_curl(True)
    baseline = measured_curl(False)
    print(f"\n[controls] curl transformed={curled:.2f} baseline={baseline:.2f}")
    assert curled > 0
    assert curled > 5 * abs(baseline)


@pytest.mark.slow
def test_c11_brush_regrowth(trained_right):
    rule, cfg, _ = trained_right
    eng = Engine(cfg, rule, 64, 64, seed=5)
    eng.step(24 * 30)
    erased = brush_erase(eng.state(), (32, 32), 8.0)
    yy, xx = np.mgrid[0:64, 0:64]
    disk = (xx - 32.0) ** 2 + (yy - 32.0) ** 2 <= 8.0 ** 2
    assert not erased.grid[disk].any()
    eng2 = Engine(cfg, rule, state=erased, seed=11)
    eng2.step(200)
    inside = np.abs(eng2.s[disk]).mean()
    outside = np.abs(eng2.s[~disk]).mean()
    print(f"\n[criterion 11] inside={inside:.4f} outside={outside:.4f} "
          f"ratio={inside / outside:.3f}")
    assert inside >= 0.5 * outside
