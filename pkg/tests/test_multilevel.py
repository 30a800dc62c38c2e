"""Cycle planning, cosine learning rate, the interpolation operator, and
the multi-level training loop."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odenet.data import AugmentConfig, DataFeed, synthesize
from odenet.errors import ConfigError, DivergenceError
from odenet.model import ResNetSpec, build_model, forward
from odenet.multilevel import (Cycle, CycleSchedule, LRState, OptimizerSettings,
                               baseline_train, cosine_lr, interpolate,
                               plan_schedule, theoretical_time_saved, train)

# ------------------------------------------------------------- cosine_lr


def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(LRState(0, 100, 0.001, 0.5)) == 0.5
    assert cosine_lr(LRState(100, 100, 0.001, 0.5)) == 0.001
    assert abs(cosine_lr(LRState(50, 100, 0.001, 0.5)) - 0.2505) < 1e-12


def test_cosine_zero_length_cycle_rejected():
    with pytest.raises(ValueError):
        cosine_lr(LRState(0, 0, 0.001, 0.5))


def test_cosine_monotone_over_thousand_steps():
    vals = [cosine_lr(LRState(t, 1000, 0.001, 0.5)) for t in range(1001)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert vals[0] == 0.5 and vals[-1] == 0.001


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 10_000), st.floats(1e-6, 0.1), st.floats(0.2, 10.0))
def test_cosine_range_property(t_total, eta_min, eta_max):
    for t_cur in (0, 1, t_total // 3, t_total - 1, t_total):
        lr = cosine_lr(LRState(t_cur, t_total, eta_min, eta_max))
        assert eta_min <= lr <= eta_max


# -------------------------------------------------- theoretical_time_saved

def test_time_saved_known_values():
    assert theoretical_time_saved(0) == 0.0
    assert theoretical_time_saved(1) == 0.25
    assert theoretical_time_saved(2) == pytest.approx(5 / 12, abs=1e-15)
    assert theoretical_time_saved(5) == pytest.approx(1 - 63 / 192, abs=1e-15)
    # the table rounds these to 25 / 42 / 67 percent
    assert round(100 * theoretical_time_saved(2)) == 42
    assert round(100 * theoretical_time_saved(5)) == 67


def test_time_saved_monotone_with_diminishing_gains():
    vals = [theoretical_time_saved(k) for k in range(11)]
    diffs = [b - a for a, b in zip(vals, vals[1:])]
    assert all(d > 0 for d in diffs)
    assert all(d2 < d1 for d1, d2 in zip(diffs, diffs[1:]))


def test_time_saved_negative_k_rejected():
    with pytest.raises(ValueError):
        theoretical_time_saved(-1)


# ------------------------------------------------------------ schedules

def test_plan_matches_three_cycle_table():
    sched = plan_schedule((2, 2, 2), k=2, total_steps=60_000)
    assert [c.blocks_per_stage for c in sched.cycles] == [
        (2, 2, 2), (4, 4, 4), (8, 8, 8)]
    assert [c.h for c in sched.cycles] == [1.0, 0.5, 0.25]
    assert [c.steps for c in sched.cycles] == [20_000, 20_000, 20_000]
    assert sched.k == 2 and sched.total_steps == 60_000


def test_plan_k0_is_a_plain_run():
    sched = plan_schedule((3, 3, 3), k=0, total_steps=500)
    assert len(sched.cycles) == 1
    assert sched.cycles[0] == Cycle((3, 3, 3), 1.0, 500)


def test_plan_even_split_arithmetic():
    sched = plan_schedule((2, 2, 2), k=1, total_steps=10)
    assert [c.steps for c in sched.cycles] == [5, 5]


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 6), st.integers(1, 5000))
def test_plan_equal_split_remainder_property(k, total):
    if total < k + 1:
        with pytest.raises(ConfigError):
            plan_schedule((1, 1, 1), k=k, total_steps=total)
        return
    sched = plan_schedule((1, 1, 1), k=k, total_steps=total)
    steps = [c.steps for c in sched.cycles]
    assert sum(steps) == total
    assert all(abs(s - total / (k + 1)) <= 1 for s in steps)
    # extra steps go to the later cycles
    assert steps == sorted(steps)


def test_plan_explicit_split_and_h0():
    sched = plan_schedule((2, 2, 2), k=2, total_steps=12, split=[2, 4, 6], h0=2.0)
    assert [c.steps for c in sched.cycles] == [2, 4, 6]
    assert [c.h for c in sched.cycles] == [2.0, 1.0, 0.5]


def test_plan_rejects_bad_requests():
    with pytest.raises(ConfigError):
        plan_schedule((2, 2, 2), k=-1, total_steps=10)
    with pytest.raises(ConfigError):
        plan_schedule((2, 2, 2), k=1, total_steps=10, split="fibonacci")
    with pytest.raises(ConfigError):
        plan_schedule((2, 2, 2), k=1, total_steps=10, split=[10])
    with pytest.raises(ConfigError):
        plan_schedule((2, 2, 2), k=1, total_steps=10, split=[3, 8])
    with pytest.raises(ConfigError):
        plan_schedule((2, 2, 2), k=1, total_steps=10, split=[10, 0])


def test_cycle_schedule_validates_doubling_halving():
    ok = Cycle((2, 2, 2), 1.0, 5)
    with pytest.raises(ValueError):
        CycleSchedule(cycles=(ok, Cycle((4, 4, 2), 0.5, 5)))
    with pytest.raises(ValueError):
        CycleSchedule(cycles=(ok, Cycle((4, 4, 4), 0.4, 5)))
    with pytest.raises(ValueError):
        CycleSchedule(cycles=(ok, Cycle((4, 4, 4), 0.5, 0)))
    with pytest.raises(ValueError):
        CycleSchedule(cycles=(ok,), eta_min=0.5, eta_max=0.1)
    with pytest.raises(ValueError):
        CycleSchedule(cycles=())


# ----------------------------------------------------------- interpolate

def _marked_model(blocks=(3, 2, 2), dtype=np.float64):
    spec = ResNetSpec(blocks_per_stage=blocks, base_filters=(4, 4, 4),
                      step_size=1.0, step_size_mode="explicit",
                      input_channels=3, input_hw=8)
    model = build_model(spec, seed=0, dtype=dtype)
    for s, stage in enumerate(model.stages):
        for i, block in enumerate(stage):
            block.conv1.value.data[:] = 10 * s + i + 1
            block.bn1.running_mean.value.data[:] = 100 + 10 * s + i
            block.conv1.momentum_buffer.data[:] = -float(i + 1)
    return model


def _mark(block):
    return float(block.conv1.value.data.flat[0])


def test_interpolate_position_mapping():
    model = _marked_model()
    out = interpolate(model)
    s0 = out.stages[0]
    # old stage-0 blocks carried marks 1,2,3; mapping per the doubling rule
    assert [_mark(b) for b in s0] == [1, 2, 2, 2, 3, 3]
    assert [b.is_downsampling for b in s0] == [False] * 6
    # downsampling stages keep the projection only at position 0
    s1 = out.stages[1]
    assert [_mark(b) for b in s1] == [11, 12, 12, 12]
    assert [b.is_downsampling for b in s1] == [True, False, False, False]
    assert s1[0].shortcut_projection is not None
    assert all(b.shortcut_projection is None for b in s1[1:])


def test_interpolate_inserted_blocks_bitwise_equal_predecessor():
    out = interpolate(_marked_model())
    for stage in out.stages:
        for p in range(3, len(stage), 2):
            prev, ins = stage[p - 1], stage[p]
            for a, b in zip(prev.parameters(), ins.parameters()):
                assert np.array_equal(a.value.data, b.value.data)
        # the stage's second slot copies the block after it, not block 0
        for a, b in zip(stage[1].parameters(), stage[2].parameters()):
            assert np.array_equal(a.value.data, b.value.data)


def test_interpolate_running_stats_copied_and_momentum_zeroed():
    model = _marked_model()
    out = interpolate(model)
    s0 = out.stages[0]
    assert s0[2].bn1.running_mean.value.data[0] == 101  # old block 1's stats
    assert s0[3].bn1.running_mean.value.data[0] == 101
    for stage in out.stages:
        for block in stage:
            assert not block.conv1.momentum_buffer.data.any()


def test_interpolate_can_copy_momentum():
    out = interpolate(_marked_model(), copy_momentum=True)
    assert out.stages[0][0].conv1.momentum_buffer.data.flat[0] == -1.0
    assert out.stages[0][3].conv1.momentum_buffer.data.flat[0] == -2.0


def test_interpolate_doubles_blocks_and_halves_h():
    model = _marked_model(blocks=(2, 2, 2))
    out = interpolate(model)
    assert out.spec.blocks_per_stage == (4, 4, 4)
    assert out.spec.step_size == 0.5
    assert len(out.stages) == 3
    twice = interpolate(out)
    assert twice.spec.blocks_per_stage == (8, 8, 8)
    assert twice.spec.step_size == 0.25


def test_interpolate_renames_parameters_by_position():
    out = interpolate(_marked_model())
    assert out.stages[0][3].conv1.name == "stage0.block3.conv1"
    assert out.stages[2][1].bn2.gamma.name == "stage2.block1.bn2.gamma"


def test_interpolate_zero_residual_logits_bit_identical():
    spec = ResNetSpec(blocks_per_stage=(2, 2, 2), base_filters=(4, 4, 4),
                      step_size=1.0, step_size_mode="explicit",
                      input_channels=3, input_hw=8)
    model = build_model(spec, seed=1, dtype=np.float64)
    for stage in model.stages:
        for block in stage:
            block.conv2.value.data[:] = 0.0
    x = np.random.default_rng(2).normal(size=(4, 3, 8, 8))
    la, _ = forward(model, x, mode="eval")
    lb, _ = forward(interpolate(model), x, mode="eval")
    assert np.array_equal(la.data, lb.data)


def test_interpolate_small_residual_continuity_eps_squared():
    # scaling every residual kernel by eps makes each block's update
    # O(eps^2), and grid refinement then perturbs logits at that order
    spec = ResNetSpec(blocks_per_stage=(2, 2, 2), base_filters=(8, 8, 8),
                      step_size=1.0, step_size_mode="explicit",
                      input_channels=3, input_hw=16)
    x = np.random.default_rng(3).normal(size=(4, 3, 16, 16))

    def rel_diff(eps):
        model = build_model(spec, seed=4, dtype=np.float64)
        for stage in model.stages:
            for block in stage:
                block.conv1.value.data *= eps
                block.conv2.value.data *= eps
        la, _ = forward(model, x, mode="eval")
        lb, _ = forward(interpolate(model), x, mode="eval")
        denom = np.linalg.norm(la.data)
        return float(np.linalg.norm(lb.data - la.data) / denom)

    d3 = rel_diff(1e-3)
    assert d3 < 1e-4
    # quadratic law: two decades in eps move the diff by ~four decades
    d1 = rel_diff(1e-1)
    assert d3 < d1 * 1e-3


def test_interpolate_requires_explicit_mode():
    model = build_model(ResNetSpec(blocks_per_stage=(2, 2, 2),
                                   base_filters=(4, 4, 4), input_hw=8,
                                   step_size_mode="implicit"), seed=0)
    with pytest.raises(ConfigError):
        interpolate(model)


def test_interpolate_single_block_stages_warn_but_work():
    spec = ResNetSpec(blocks_per_stage=(1, 1, 1), base_filters=(4, 4, 4),
                      step_size=1.0, step_size_mode="explicit",
                      input_channels=3, input_hw=8)
    model = build_model(spec, seed=5, dtype=np.float64)
    with pytest.warns(UserWarning):
        out = interpolate(model)
    assert out.spec.blocks_per_stage == (2, 2, 2)
    # stage 0 copies its only block; downsampling stages get a fresh insert
    assert np.array_equal(out.stages[0][1].conv1.value.data,
                          model.stages[0][0].conv1.value.data)
    assert not np.array_equal(out.stages[1][1].conv1.value.data,
                              model.stages[1][0].conv1.value.data)
    logits, _ = forward(out, np.random.default_rng(6).normal(size=(2, 3, 8, 8)),
                        mode="eval")
    assert np.isfinite(logits.data).all()


# ------------------------------------------------------------- training

def small_feed(seed=0, n=120, batch=20, hw=8, classes=4):
    train_ds, test_ds = synthesize(n, 40, hw=hw, channels=3,
                                   num_classes=classes, seed=99)
    return DataFeed(train_ds, test_ds, batch_size=batch,
                    augment=AugmentConfig(pad=2), seed=seed)


def small_spec(blocks=(1, 1, 1), hw=8, classes=4):
    return ResNetSpec(blocks_per_stage=blocks, base_filters=(4, 4, 4),
                      step_size=1.0, step_size_mode="explicit",
                      input_channels=3, input_hw=hw, num_classes=classes)


def test_single_step_run():
    feed = small_feed()
    sched = CycleSchedule(cycles=(Cycle((1, 1, 1), 1.0, 1),))
    model, report = train(sched, feed, small_spec(), seed=0,
                          dtype=np.float64, eval_each_cycle=True)
    assert len(report.steps) == 1
    assert report.steps[0].lr == 0.5  # t_cur=0 rail
    assert math.isfinite(report.steps[0].loss)
    assert report.cycles[0].test_error is not None
    fresh = build_model(small_spec(), seed=0, dtype=np.float64)
    assert not np.array_equal(model.initial_conv.value.data,
                              fresh.initial_conv.value.data)


def test_training_is_deterministic():
    sched = plan_schedule((1, 1, 1), k=1, total_steps=8)
    runs = []
    for _ in range(2):
        _, report = train(sched, small_feed(seed=3), small_spec(), seed=7,
                          eval_each_cycle=False)
        runs.append([r.loss for r in report.steps])
    assert runs[0] == runs[1]


def test_report_counts_and_interpolation_marks():
    sched = plan_schedule((1, 1, 1), k=2, total_steps=9)
    model, report = train(sched, small_feed(), small_spec(),
                          eval_each_cycle=False)
    assert len(report.steps) == 9
    assert [c.steps for c in report.cycles] == [3, 3, 3]
    assert report.interpolations == [3, 6]
    assert model.spec.blocks_per_stage == (4, 4, 4)
    assert model.spec.step_size == 0.25
    assert [c.blocks_per_stage for c in report.cycles] == [
        (1, 1, 1), (2, 2, 2), (4, 4, 4)]


def test_reset_lr_restarts_the_curve():
    sched = plan_schedule((1, 1, 1), k=1, total_steps=12)
    _, with_reset = train(sched, small_feed(), small_spec(),
                          reset_lr=True, eval_each_cycle=False)
    lrs = [r.lr for r in with_reset.steps]
    assert lrs[0] == 0.5 and lrs[6] == 0.5  # rail again at cycle 1 start
    # last step of the cycle evaluates at t_cur = 5 of 6, near the floor
    assert lrs[5] == min(lrs[:6]) and lrs[5] < 0.05

    _, no_reset = train(sched, small_feed(), small_spec(),
                        reset_lr=False, eval_each_cycle=False)
    lrs2 = [r.lr for r in no_reset.steps]
    assert lrs2[0] == 0.5
    assert lrs2[6] < 0.3  # curve keeps descending through the boundary
    assert all(b <= a for a, b in zip(lrs2, lrs2[1:]))


def test_divergence_aborts_with_step_index():
    feed = small_feed()
    feed.train.images[:] = np.nan
    sched = CycleSchedule(cycles=(Cycle((1, 1, 1), 1.0, 4),))
    with pytest.raises(DivergenceError) as ei:
        train(sched, feed, small_spec(), eval_each_cycle=False)
    assert ei.value.step == 0
    assert "step 0" in str(ei.value)


def test_wall_clock_roughly_doubles_per_cycle():
    train_ds, test_ds = synthesize(128, 32, hw=16, channels=3,
                                   num_classes=4, seed=5)
    feed = DataFeed(train_ds, test_ds, batch_size=32,
                    augment=AugmentConfig(pad=2), seed=0)
    spec = ResNetSpec(blocks_per_stage=(4, 4, 4), base_filters=(8, 8, 8),
                      step_size=1.0, step_size_mode="explicit",
                      input_channels=3, input_hw=16, num_classes=4)
    sched = plan_schedule((4, 4, 4), k=2, total_steps=36)
    _, report = train(sched, feed, spec, eval_each_cycle=False, seed=1)
    walls = [c.wall_seconds for c in report.cycles]
    assert all(w > 0 for w in walls)
    for shallow, deep in zip(walls, walls[1:]):
        assert 1.5 <= deep / shallow <= 2.5


def test_baseline_first_cycle_keeps_shallow_arch():
    sched = plan_schedule((1, 1, 1), k=2, total_steps=9)
    model, report = baseline_train("first_cycle", sched, small_feed(),
                                   small_spec(), eval_each_cycle=False)
    assert model.spec.blocks_per_stage == (1, 1, 1)
    assert [c.blocks_per_stage for c in report.cycles] == [(1, 1, 1)] * 3
    assert [c.steps for c in report.cycles] == [3, 3, 3]
    assert report.interpolations == []
    assert len(report.steps) == sched.total_steps


def test_baseline_last_cycle_trains_final_arch_throughout():
    sched = plan_schedule((1, 1, 1), k=2, total_steps=9)
    model, report = baseline_train("last_cycle", sched, small_feed(),
                                   small_spec(), eval_each_cycle=False)
    assert model.spec.blocks_per_stage == (4, 4, 4)
    assert model.spec.step_size == 0.25
    assert [c.blocks_per_stage for c in report.cycles] == [(4, 4, 4)] * 3


def test_baseline_rejects_unknown_mode():
    sched = plan_schedule((1, 1, 1), k=0, total_steps=2)
    with pytest.raises(ConfigError):
        baseline_train("median_cycle", sched, small_feed(), small_spec())


def test_multilevel_requires_explicit_mode_for_k_positive():
    sched = plan_schedule((1, 1, 1), k=1, total_steps=4)
    spec = ResNetSpec(blocks_per_stage=(1, 1, 1), base_filters=(4, 4, 4),
                      input_channels=3, input_hw=8, num_classes=4,
                      step_size_mode="implicit")
    with pytest.raises(ConfigError):
        train(sched, small_feed(), spec)


def test_prefetching_feed_trains_identically():
    sched = plan_schedule((1, 1, 1), k=1, total_steps=8)

    def run(prefetch):
        train_ds, test_ds = synthesize(120, 40, hw=8, channels=3,
                                       num_classes=4, seed=99)
        feed = DataFeed(train_ds, test_ds, batch_size=20,
                        augment=AugmentConfig(pad=2), seed=11,
                        prefetch=prefetch)
        _, report = train(sched, feed, small_spec(), seed=2,
                          eval_each_cycle=False)
        return [r.loss for r in report.steps]

    assert run(False) == run(True)
