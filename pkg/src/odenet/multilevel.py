"""Multi-level training: start shallow with a large step size, then
repeatedly double the depth while halving h, warm-starting each deeper
model by interpolating the shallower one.

Because a residual stage approximates an ODE flow, a trained m-block
stage with step h induces a natural initialization for a 2m-block stage
with step h/2: keep the old blocks at the even grid points and fill the
odd points with copies of their neighbors. Early cycles run on models
with half (a quarter, ...) of the final depth, which is where the wall
clock saving comes from.

The learning rate follows a cosine annealing curve

    eta = eta_min + (eta_max - eta_min) * (1 + cos(pi * t_cur / t_total)) / 2

restarted at each cycle boundary by default (reset_lr=False spans one
curve over all remaining steps instead).
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .csvio import write_csv
from .errors import ConfigError, DivergenceError
from .model import (BlockParams, BNParams, PoolPadBlock, ResNetModel, ResNetSpec,
                    build_model, evaluate, forward)
from .optim import sgd_step, zero_grads
from .ops import softmax_cross_entropy
from .tensor import Parameter, Tape

__all__ = [
    "Cycle", "CycleSchedule", "LRState", "cosine_lr", "theoretical_time_saved",
    "plan_schedule", "interpolate", "OptimizerSettings", "StepRecord",
    "CycleRecord", "TrainReport", "train", "baseline_train",
    "write_train_log", "write_summary",
]


@dataclass(frozen=True)
class Cycle:
    blocks_per_stage: tuple[int, int, int]
    h: float
    steps: int


@dataclass(frozen=True)
class CycleSchedule:
    """Cycle list obeying the doubling rule, plus the shared LR range."""
    cycles: tuple[Cycle, ...]
    eta_min: float = 0.001
    eta_max: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "cycles", tuple(self.cycles))
        if not self.cycles:
            raise ValueError("schedule needs at least one cycle")
        if not (0 < self.eta_min < self.eta_max):
            raise ValueError(f"need 0 < eta_min < eta_max, got "
                             f"{self.eta_min}, {self.eta_max}")
        for c in self.cycles:
            if c.steps < 1:
                raise ValueError("every cycle needs at least one step")
        for prev, nxt in zip(self.cycles, self.cycles[1:]):
            want = tuple(2 * b for b in prev.blocks_per_stage)
            if tuple(nxt.blocks_per_stage) != want:
                raise ValueError(
                    f"cycle blocks {nxt.blocks_per_stage} should double {prev.blocks_per_stage}")
            if nxt.h != prev.h / 2:
                raise ValueError(f"cycle h {nxt.h} should halve {prev.h}")

    @property
    def k(self) -> int:
        return len(self.cycles) - 1

    @property
    def total_steps(self) -> int:
        return sum(c.steps for c in self.cycles)


@dataclass
class LRState:
    """Position on one cosine annealing curve."""
    t_cur: int
    t_total: int
    eta_min: float
    eta_max: float


def cosine_lr(state: LRState) -> float:
    """Cosine-annealed learning rate at the state's position.

    Exact at the rails: t_cur=0 gives eta_max, t_cur=t_total gives
    eta_min, with a strictly decreasing curve in between.
    """
    if state.t_total <= 0:
        raise ValueError("t_total must be positive")
    if state.t_cur <= 0:
        return state.eta_max
    if state.t_cur >= state.t_total:
        return state.eta_min
    cosv = math.cos(math.pi * state.t_cur / state.t_total)
    return state.eta_min + 0.5 * (state.eta_max - state.eta_min) * (1.0 + cosv)


def theoretical_time_saved(k: int) -> float:
    """Fraction of per-step work saved by k doublings relative to training
    the final depth for all steps, assuming cost proportional to depth and
    steps split evenly: 1 - (2^(k+1) - 1) / (2^k * (k + 1))."""
    if k < 0:
        raise ValueError("k must be >= 0")
    return float(1 - Fraction(2 ** (k + 1) - 1, 2 ** k * (k + 1)))


def plan_schedule(base_blocks: tuple[int, int, int], k: int, total_steps: int,
                  split="equal", h0: float = 1.0,
                  eta_min: float = 0.001, eta_max: float = 0.5) -> CycleSchedule:
    """Lay out k+1 cycles starting from ``base_blocks`` at step size h0.

    ``split`` is either "equal" (cycles get total_steps // (k+1) each, the
    remainder spread one step at a time over the last cycles) or an
    explicit per-cycle step list summing to total_steps.
    """
    if k < 0:
        raise ConfigError(f"k must be >= 0, got {k}")
    n_cycles = k + 1
    if isinstance(split, str):
        if split != "equal":
            raise ConfigError(f"unknown split {split!r}")
        if total_steps < n_cycles:
            raise ConfigError(f"{total_steps} steps cannot cover {n_cycles} cycles")
        base, rem = divmod(total_steps, n_cycles)
        steps = [base] * n_cycles
        for i in range(rem):
            steps[n_cycles - 1 - i] += 1
    else:
        steps = [int(s) for s in split]
        if len(steps) != n_cycles:
            raise ConfigError(f"split lists {len(steps)} cycles, expected {n_cycles}")
        if any(s < 1 for s in steps):
            raise ConfigError("every cycle needs at least one step")
        if total_steps is not None and sum(steps) != total_steps:
            raise ConfigError(f"split sums to {sum(steps)}, expected {total_steps}")
    cycles = []
    blocks = tuple(base_blocks)
    h = h0
    for i in range(n_cycles):
        cycles.append(Cycle(blocks_per_stage=blocks, h=h, steps=steps[i]))
        blocks = tuple(2 * b for b in blocks)
        h = h / 2
    return CycleSchedule(cycles=tuple(cycles), eta_min=eta_min, eta_max=eta_max)


def _clone_bn(bn: BNParams, prefix: str, copy_momentum: bool) -> BNParams:
    return BNParams(
        gamma=bn.gamma.clone(f"{prefix}.gamma", copy_momentum),
        beta=bn.beta.clone(f"{prefix}.beta", copy_momentum),
        running_mean=bn.running_mean.clone(f"{prefix}.running_mean", copy_momentum),
        running_var=bn.running_var.clone(f"{prefix}.running_var", copy_momentum),
    )


def _clone_block(block: BlockParams, prefix: str, copy_momentum: bool,
                 as_downsampling: bool | None = None) -> BlockParams:
    down = block.is_downsampling if as_downsampling is None else as_downsampling
    proj = None
    if down:
        if block.shortcut_projection is None:
            raise ValueError("downsampling block without a projection")
        proj = block.shortcut_projection.clone(f"{prefix}.shortcut", copy_momentum)
    return BlockParams(
        bn1=_clone_bn(block.bn1, f"{prefix}.bn1", copy_momentum),
        conv1=block.conv1.clone(f"{prefix}.conv1", copy_momentum),
        bn2=_clone_bn(block.bn2, f"{prefix}.bn2", copy_momentum),
        conv2=block.conv2.clone(f"{prefix}.conv2", copy_momentum),
        is_downsampling=down,
        shortcut_projection=proj,
    )


def _fresh_block(stage: int, index: int, channels: int, dtype,
                 rng: np.random.Generator) -> BlockParams:
    from .model import _he_normal, _make_bn
    name = f"stage{stage}.block{index}"
    return BlockParams(
        bn1=_make_bn(f"{name}.bn1", channels, dtype),
        conv1=Parameter(f"{name}.conv1",
                        _he_normal(rng, (channels, channels, 3, 3), dtype)),
        bn2=_make_bn(f"{name}.bn2", channels, dtype),
        conv2=Parameter(f"{name}.conv2",
                        _he_normal(rng, (channels, channels, 3, 3), dtype)),
        is_downsampling=False,
        shortcut_projection=None,
    )


def interpolate(model: ResNetModel, copy_momentum: bool = False) -> ResNetModel:
    """Double every stage's block count and halve h, warm-starting the new
    model from the old one.

    Old block i lands at position 2i. Each inserted block at an odd
    position 2i+1 is a parameter copy (running statistics included) of
    old block i, except position 1, which copies old block 1: position 1
    sits right after the downsampling block, whose channel shapes do not
    fit a stride-1 slot. Inserted blocks are never downsampling. Momentum
    buffers start at zero unless ``copy_momentum``.

    A one-block stage has no old block 1 to copy; stage 0 falls back to
    copying its only block, downsampling stages get a freshly initialized
    insert (with a warning either way).
    """
    spec = model.spec
    if spec.step_size_mode != "explicit":
        raise ConfigError("interpolation requires explicit step-size mode")
    for stage in model.stages:
        for block in stage:
            if not isinstance(block, BlockParams):
                raise ValueError("interpolation requires a pure residual structure")
    new_spec = replace(spec,
                       blocks_per_stage=tuple(2 * m for m in spec.blocks_per_stage),
                       step_size=spec.step_size / 2)
    dtype = model.dtype
    stages: list[list[BlockParams]] = []
    for s, old in enumerate(model.stages):
        m = len(old)
        new_stage: list[BlockParams | None] = [None] * (2 * m)
        for i, blk in enumerate(old):
            new_stage[2 * i] = _clone_block(blk, f"stage{s}.block{2 * i}", copy_momentum)
        for i in range(1, m):
            new_stage[2 * i + 1] = _clone_block(
                old[i], f"stage{s}.block{2 * i + 1}", copy_momentum,
                as_downsampling=False)
        if m >= 2:
            new_stage[1] = _clone_block(old[1], f"stage{s}.block1", copy_momentum,
                                        as_downsampling=False)
        else:
            if old[0].is_downsampling:
                warnings.warn(f"stage {s} has a single downsampling block; "
                              "its insert is freshly initialized")
                rng = np.random.default_rng([885731, s, 2 * m])
                new_stage[1] = _fresh_block(s, 1, old[0].out_channels, dtype, rng)
            else:
                warnings.warn(f"stage {s} has a single block; its insert copies it")
                new_stage[1] = _clone_block(old[0], f"stage{s}.block1", copy_momentum,
                                            as_downsampling=False)
        stages.append(new_stage)
    return ResNetModel(
        spec=new_spec,
        initial_conv=model.initial_conv.clone("initial_conv", copy_momentum),
        stages=stages,
        final_bn=_clone_bn(model.final_bn, "final_bn", copy_momentum),
        fc_weight=model.fc_weight.clone("classifier.weight", copy_momentum),
        fc_bias=model.fc_bias.clone("classifier.bias", copy_momentum),
        dtype=dtype,
    )


@dataclass(frozen=True)
class OptimizerSettings:
    momentum: float = 0.9
    weight_decay: float = 2e-4
    reset_momentum: bool = True


@dataclass
class StepRecord:
    step: int
    epoch: int
    cycle: int
    lr: float
    loss: float
    acc: float


@dataclass
class CycleRecord:
    cycle: int
    blocks_per_stage: tuple[int, int, int]
    h: float
    steps: int
    wall_seconds: float
    test_error: float | None


@dataclass
class TrainReport:
    steps: list[StepRecord] = field(default_factory=list)
    cycles: list[CycleRecord] = field(default_factory=list)
    interpolations: list[int] = field(default_factory=list)

    @property
    def wall_seconds_total(self) -> float:
        return sum(c.wall_seconds for c in self.cycles)

    @property
    def final_test_error(self) -> float | None:
        return self.cycles[-1].test_error if self.cycles else None


def _cycle_spec(spec_base: ResNetSpec, cycle: Cycle) -> ResNetSpec:
    if spec_base.step_size_mode == "implicit":
        if cycle.h != 1.0:
            raise ConfigError("implicit step-size mode cannot run a scaled h; "
                              "use explicit mode for multi-level schedules")
        return replace(spec_base, blocks_per_stage=cycle.blocks_per_stage, step_size=1.0)
    return replace(spec_base, blocks_per_stage=cycle.blocks_per_stage, step_size=cycle.h)


def _run_plan(model: ResNetModel, plan: Sequence[tuple[Cycle, bool]],
              schedule: CycleSchedule, feed, opt: OptimizerSettings,
              reset_lr: bool, eval_each_cycle: bool,
              on_cycle_end: Callable | None) -> tuple[ResNetModel, TrainReport]:
    """Shared cycle loop. ``plan`` pairs each Cycle with an
    interpolate-before flag; wall time covers forward, backward, and the
    update, not batch preparation or evaluation."""
    report = TrainReport()
    total_steps = sum(c.steps for c, _ in plan)
    stream = feed.train_stream(total_steps)
    lr_state = LRState(0, total_steps, schedule.eta_min, schedule.eta_max)
    step = 0
    trainables = model.trainable_parameters()
    for ci, (cycle, interp) in enumerate(plan):
        if interp:
            model = interpolate(model, copy_momentum=not opt.reset_momentum)
            trainables = model.trainable_parameters()
            report.interpolations.append(step)
            if model.spec.blocks_per_stage != cycle.blocks_per_stage:
                raise RuntimeError("interpolated depth does not match the schedule")
        if reset_lr:
            lr_state = LRState(0, cycle.steps, schedule.eta_min, schedule.eta_max)
        wall = 0.0
        for _ in range(cycle.steps):
            _, epoch, xb, yb = next(stream)
            t0 = time.perf_counter()
            lr = cosine_lr(lr_state)
            with Tape() as tape:
                logits, _ = forward(model, xb, mode="train")
                loss = softmax_cross_entropy(logits, yb)
            loss_val = loss.data.item()
            if not math.isfinite(loss_val):
                raise DivergenceError(f"non-finite loss {loss_val} at step {step}",
                                      step=step)
            tape.backward(loss)
            try:
                sgd_step(trainables, lr, momentum=opt.momentum,
                         weight_decay=opt.weight_decay)
            except DivergenceError as e:
                e.step = step
                raise
            zero_grads(model.parameters())
            wall += time.perf_counter() - t0
            acc = float((logits.data.argmax(axis=1) == np.asarray(yb)).mean())
            report.steps.append(StepRecord(step=step, epoch=epoch, cycle=ci,
                                           lr=lr, loss=loss_val, acc=acc))
            lr_state.t_cur += 1
            step += 1
        err = evaluate(model, feed.eval_batches()) if eval_each_cycle else None
        report.cycles.append(CycleRecord(
            cycle=ci, blocks_per_stage=model.spec.blocks_per_stage,
            h=model.spec.effective_h, steps=cycle.steps,
            wall_seconds=wall, test_error=err))
        if on_cycle_end is not None:
            on_cycle_end(ci, model)
    return model, report


def train(schedule: CycleSchedule, feed, spec_base: ResNetSpec,
          opt: OptimizerSettings = OptimizerSettings(), reset_lr: bool = True,
          seed: int = 0, dtype=np.float32, eval_each_cycle: bool = True,
          on_cycle_end: Callable | None = None) -> tuple[ResNetModel, TrainReport]:
    """Run the full multi-level schedule from a fresh shallow model."""
    if schedule.k > 0 and spec_base.step_size_mode != "explicit":
        raise ConfigError("multi-level schedules require explicit step-size mode")
    model = build_model(_cycle_spec(spec_base, schedule.cycles[0]), seed, dtype)
    plan = [(c, i > 0) for i, c in enumerate(schedule.cycles)]
    return _run_plan(model, plan, schedule, feed, opt, reset_lr,
                     eval_each_cycle, on_cycle_end)


def baseline_train(mode: str, schedule: CycleSchedule, feed, spec_base: ResNetSpec,
                   opt: OptimizerSettings = OptimizerSettings(), reset_lr: bool = True,
                   seed: int = 0, dtype=np.float32, eval_each_cycle: bool = True,
                   on_cycle_end: Callable | None = None) -> tuple[ResNetModel, TrainReport]:
    """Train a fixed-depth control under the same step budget and LR
    restart points as ``schedule``.

    mode "first_cycle" holds the shallow architecture of cycle 0 for the
    whole run; mode "last_cycle" trains the final architecture from
    scratch for the whole run (the conventional training it is compared
    against).
    """
    if mode not in ("first_cycle", "last_cycle"):
        raise ConfigError(f"unknown baseline mode {mode!r}")
    ref = schedule.cycles[0] if mode == "first_cycle" else schedule.cycles[-1]
    model = build_model(_cycle_spec(spec_base, ref), seed, dtype)
    plan = [(Cycle(ref.blocks_per_stage, ref.h, c.steps), False)
            for c in schedule.cycles]
    return _run_plan(model, plan, schedule, feed, opt, reset_lr,
                     eval_each_cycle, on_cycle_end)


def _blocks_str(blocks: tuple[int, int, int]) -> str:
    return "-".join(str(b) for b in blocks)


def write_train_log(path: str, report: TrainReport, config_hash: str | None = None) -> None:
    write_csv(path,
              ["step", "epoch", "cycle", "lr", "train_loss", "train_acc"],
              [(r.step, r.epoch, r.cycle, r.lr, r.loss, r.acc) for r in report.steps],
              comment=None if config_hash is None else f"config_hash={config_hash}")


def write_summary(path: str, report: TrainReport, config_hash: str | None = None) -> None:
    write_csv(path,
              ["cycle", "blocks", "h", "steps", "wall_seconds", "test_error"],
              [(c.cycle, _blocks_str(c.blocks_per_stage), c.h, c.steps,
                c.wall_seconds, c.test_error) for c in report.cycles],
              comment=None if config_hash is None else f"config_hash={config_hash}")
