"""Lesion studies and norm profiles.

If a trained stage really behaves like an ODE discretization, each
block's update G = h * F(Y) should be small next to its input Y, blocks
should be roughly interchangeable within a stage, and deleting one
should perturb rather than destroy the computation. The tools here
measure exactly that: per-block norm profiles, single-block removal,
within-stage shuffling, and step-size-normalized residual curves
comparable across depths.

All interventions return new models; the input model is never touched.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .csvio import write_csv
from .model import (BlockParams, PoolPadBlock, ResNetModel, evaluate, forward)
from .multilevel import _clone_bn, _clone_block

__all__ = [
    "BlockNorms", "NormProfile", "profile_norms", "remove_block",
    "shuffle_blocks", "random_permutation_fixed_first", "LesionRecord",
    "LesionReport", "lesion_sweep", "FNormPoint", "f_norm_curves",
    "curve_correlation", "write_norm_profile", "write_lesion_report",
    "write_fnorm_curves",
]


@dataclass
class BlockNorms:
    stage: int
    index: int
    norm_y: float
    norm_g: float
    norm_f: float


@dataclass
class NormProfile:
    records: list[BlockNorms]
    gamma: float
    depth: int


def profile_norms(model: ResNetModel, batches) -> NormProfile:
    """Mean per-example L2 norms of each block's input Y and update G over
    an (x, y) batch iterable, eval mode.

    norm_f divides the update norm by h, making curves comparable across
    step sizes. gamma is the mean of norm_g over all blocks, the single
    number tracking how much work an average block does.
    """
    h = model.spec.effective_h
    sums: dict[tuple[int, int], list] = {}
    total = 0
    for xb, yb in batches:
        n = int(np.asarray(xb).shape[0])
        _, records = forward(model, xb, mode="eval")
        for r in records:
            acc = sums.setdefault((r.stage, r.index), [0.0, 0.0])
            acc[0] += r.norm_y * n
            acc[1] += r.norm_g * n
        total += n
    if total == 0:
        raise ValueError("profile_norms: no examples")
    out = []
    for (s, i), (sy, sg) in sorted(sums.items()):
        ny, ng = sy / total, sg / total
        out.append(BlockNorms(stage=s, index=i, norm_y=ny, norm_g=ng, norm_f=ng / h))
    gamma = float(np.mean([r.norm_g for r in out]))
    return NormProfile(records=out, gamma=gamma, depth=len(out))


def _rebuild(model: ResNetModel, stages, blocks_per_stage) -> ResNetModel:
    return ResNetModel(
        spec=replace(model.spec, blocks_per_stage=tuple(blocks_per_stage)),
        initial_conv=model.initial_conv.clone("initial_conv"),
        stages=stages,
        final_bn=_clone_bn(model.final_bn, "final_bn", False),
        fc_weight=model.fc_weight.clone("classifier.weight"),
        fc_bias=model.fc_bias.clone("classifier.bias"),
        dtype=model.dtype,
    )


def _clone_any(block, prefix: str):
    if isinstance(block, PoolPadBlock):
        return PoolPadBlock(block.in_channels, block.out_channels)
    return _clone_block(block, prefix, False)


def remove_block(model: ResNetModel, stage: int, index: int,
                 force: bool = False) -> ResNetModel:
    """Copy of the model with one block deleted from a stage.

    The first block of a stage anchors its geometry (on stages 1 and 2 it
    is the downsampling block), so index 0 is refused without ``force``.
    Forcing the removal of a downsampling block swaps in a parameter-free
    pool-pad stand-in rather than deleting it outright, keeping shapes
    legal; h is left untouched.
    """
    if not 0 <= stage < len(model.stages):
        raise ValueError(f"stage {stage} out of range")
    old_stage = model.stages[stage]
    if not 0 <= index < len(old_stage):
        raise ValueError(f"block {index} out of range for stage {stage} "
                         f"with {len(old_stage)} blocks")
    if index == 0 and not force:
        raise ValueError("refusing to remove block 0 (it anchors the stage); "
                         "pass force=True to replace it")
    victim = old_stage[index]
    counts = list(model.spec.blocks_per_stage)
    stages = []
    for s, blocks in enumerate(model.stages):
        if s != stage:
            stages.append([_clone_any(b, f"stage{s}.block{i}")
                           for i, b in enumerate(blocks)])
            continue
        if getattr(victim, "is_downsampling", False):
            # keep the slot: downsampling must still happen somewhere
            new_blocks = [PoolPadBlock(victim.in_channels, victim.out_channels)
                          if i == index else b for i, b in enumerate(blocks)]
            stages.append([_clone_any(b, f"stage{s}.block{i}")
                           for i, b in enumerate(new_blocks)])
        else:
            if len(blocks) == 1:
                raise ValueError(f"stage {stage} has a single block; cannot remove it")
            kept = [b for i, b in enumerate(blocks) if i != index]
            stages.append([_clone_any(b, f"stage{s}.block{i}")
                           for i, b in enumerate(kept)])
            counts[s] -= 1
    return _rebuild(model, stages, counts)


def shuffle_blocks(model: ResNetModel, stage: int, permutation: Sequence[int],
                   force: bool = False) -> ResNetModel:
    """Copy of the model with one stage's blocks reordered.

    ``permutation[j]`` names the old index placed at position j. It must
    fix position 0 unless ``force`` (moving a downsampling block off the
    stage head breaks shapes).
    """
    if not 0 <= stage < len(model.stages):
        raise ValueError(f"stage {stage} out of range")
    old = model.stages[stage]
    perm = [int(p) for p in permutation]
    if sorted(perm) != list(range(len(old))):
        raise ValueError(f"{perm} is not a permutation of 0..{len(old) - 1}")
    if perm[0] != 0 and not force:
        raise ValueError("permutation must keep position 0 fixed (pass force=True "
                         "to break the downsampling position)")
    stages = []
    for s, blocks in enumerate(model.stages):
        if s != stage:
            stages.append([_clone_any(b, f"stage{s}.block{i}")
                           for i, b in enumerate(blocks)])
        else:
            stages.append([_clone_any(old[p], f"stage{s}.block{j}")
                           for j, p in enumerate(perm)])
    return _rebuild(model, stages, model.spec.blocks_per_stage)


def random_permutation_fixed_first(m: int, seed: int) -> tuple[int, ...]:
    """Random permutation of 0..m-1 with position 0 fixed."""
    rng = np.random.default_rng(seed)
    rest = 1 + rng.permutation(m - 1)
    return (0, *(int(v) for v in rest))


@dataclass
class LesionRecord:
    intervention: str
    error: float
    delta: float


@dataclass
class LesionReport:
    baseline_error: float
    records: list[LesionRecord] = field(default_factory=list)


def lesion_sweep(model: ResNetModel, batches: list) -> LesionReport:
    """Remove each non-anchor block in turn and measure the test error.

    ``batches`` must be a reusable list of (x, y) pairs, it is iterated
    once per intervention.
    """
    base = evaluate(model, batches)
    report = LesionReport(baseline_error=base)
    for s, blocks in enumerate(model.stages):
        for i in range(1, len(blocks)):
            lesioned = remove_block(model, s, i)
            err = evaluate(lesioned, batches)
            report.records.append(LesionRecord(
                intervention=f"remove stage{s}.block{i}", error=err,
                delta=err - base))
    return report


@dataclass
class FNormPoint:
    model_id: str
    stage: int
    t: float
    norm_f: float


def f_norm_curves(models: Sequence[tuple[str, ResNetModel]], batches: list) -> list[FNormPoint]:
    """Sample ||F|| for every block of every model against the shared time
    axis t = index / blocks_in_stage, so an m-block stage and a 2m-block
    stage at half the step size land on nested grids."""
    points: list[FNormPoint] = []
    for model_id, model in models:
        prof = profile_norms(model, batches)
        per_stage: dict[int, int] = {}
        for r in prof.records:
            per_stage[r.stage] = max(per_stage.get(r.stage, 0), r.index + 1)
        for r in prof.records:
            points.append(FNormPoint(model_id=model_id, stage=r.stage,
                                     t=r.index / per_stage[r.stage],
                                     norm_f=r.norm_f))
    return points


def curve_correlation(points_a: Sequence[FNormPoint],
                      points_b: Sequence[FNormPoint]) -> float:
    """Pearson correlation of two models' ||F|| curves, linearly
    interpolated onto the union of their t grids, stages concatenated."""
    va, vb = [], []
    stages = sorted({p.stage for p in points_a} | {p.stage for p in points_b})
    for s in stages:
        ca = sorted((p.t, p.norm_f) for p in points_a if p.stage == s)
        cb = sorted((p.t, p.norm_f) for p in points_b if p.stage == s)
        if not ca or not cb:
            raise ValueError(f"stage {s} missing from one curve")
        ta = np.array([t for t, _ in ca])
        fa = np.array([f for _, f in ca])
        tb = np.array([t for t, _ in cb])
        fb = np.array([f for _, f in cb])
        grid = np.union1d(ta, tb)
        va.append(np.interp(grid, ta, fa))
        vb.append(np.interp(grid, tb, fb))
    a = np.concatenate(va)
    b = np.concatenate(vb)
    if a.std() == 0 or b.std() == 0:
        raise ValueError("degenerate (constant) curve")
    return float(np.corrcoef(a, b)[0, 1])


def write_norm_profile(path: str, profile: NormProfile,
                       config_hash: str | None = None) -> None:
    write_csv(path, ["stage", "block", "norm_y", "norm_g", "norm_f"],
              [(r.stage, r.index, r.norm_y, r.norm_g, r.norm_f)
               for r in profile.records],
              comment=None if config_hash is None else f"config_hash={config_hash}")


def write_lesion_report(path: str, report: LesionReport,
                        config_hash: str | None = None) -> None:
    rows = [("baseline", report.baseline_error, 0.0)]
    rows += [(r.intervention, r.error, r.delta) for r in report.records]
    write_csv(path, ["intervention", "error", "delta"], rows,
              comment=None if config_hash is None else f"config_hash={config_hash}")


def write_fnorm_curves(path: str, points: Sequence[FNormPoint],
                       config_hash: str | None = None) -> None:
    write_csv(path, ["model_id", "stage", "t", "norm_f"],
              [(p.model_id, p.stage, p.t, p.norm_f) for p in points],
              comment=None if config_hash is None else f"config_hash={config_hash}")
