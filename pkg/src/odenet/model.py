"""Pre-activation residual networks with an explicit step size.

A block computes

    F(Y) = conv2(relu(bn2(conv1(relu(bn1(Y))))))
    Y_next = shortcut(Y) + h * F(Y)

which is one forward-Euler step of size h along the learned vector
field F. The shortcut is the identity except on downsampling blocks
(the first block of stages 1 and 2), where a stride-2 1x1 projection of
the raw input matches shape. In ``implicit`` step-size mode h is fixed
at 1 and never multiplied in; ``explicit`` mode carries h so that block
counts can double while h halves without changing the modeled flow.

Stage and block indices are 0-based everywhere: stages 0..2, blocks
0..m-1 within a stage. Block 0 of stages 1 and 2 is the downsampling
block.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import Parameter, Tensor

__all__ = [
    "ResNetSpec", "BNParams", "BlockParams", "PoolPadBlock", "ResNetModel",
    "BlockRecord", "ForwardTrace", "build_model", "block_forward", "forward",
    "forward_collect", "count_params", "param_shapes", "evaluate",
]


@dataclass(frozen=True)
class ResNetSpec:
    """Architecture description; everything needed to build or rebuild a model."""

    blocks_per_stage: tuple[int, int, int] = (2, 2, 2)
    base_filters: tuple[int, int, int] = (16, 32, 64)
    width_multiplier: int = 1
    step_size: float = 1.0
    step_size_mode: str = "implicit"
    input_channels: int = 3
    input_hw: int = 32
    num_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "blocks_per_stage", tuple(self.blocks_per_stage))
        object.__setattr__(self, "base_filters", tuple(self.base_filters))
        if len(self.blocks_per_stage) != 3 or len(self.base_filters) != 3:
            raise ValueError("expected exactly three stages")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ValueError(f"blocks_per_stage must be >= 1, got {self.blocks_per_stage}")
        if self.width_multiplier < 1:
            raise ValueError("width_multiplier must be >= 1")
        if self.step_size_mode not in ("implicit", "explicit"):
            raise ValueError(f"unknown step_size_mode {self.step_size_mode!r}")
        if not (self.step_size > 0):
            raise ValueError("step_size must be positive")
        if self.step_size_mode == "implicit" and self.step_size != 1.0:
            raise ValueError("implicit mode fixes step_size at 1")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def filters(self) -> tuple[int, int, int]:
        return tuple(f * self.width_multiplier for f in self.base_filters)

    @property
    def total_blocks(self) -> int:
        return sum(self.blocks_per_stage)

    @property
    def effective_h(self) -> float:
        return self.step_size if self.step_size_mode == "explicit" else 1.0


@dataclass
class BNParams:
    gamma: Parameter
    beta: Parameter
    running_mean: Parameter
    running_var: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta, self.running_mean, self.running_var]


@dataclass
class BlockParams:
    bn1: BNParams
    conv1: Parameter
    bn2: BNParams
    conv2: Parameter
    is_downsampling: bool
    shortcut_projection: Parameter | None

    def parameters(self) -> list[Parameter]:
        out = self.bn1.parameters() + [self.conv1] + self.bn2.parameters() + [self.conv2]
        if self.shortcut_projection is not None:
            out.append(self.shortcut_projection)
        return out

    @property
    def in_channels(self) -> int:
        return self.conv1.shape[1]

    @property
    def out_channels(self) -> int:
        return self.conv2.shape[0]


@dataclass
class PoolPadBlock:
    """Parameter-free stand-in for a removed downsampling block.

    Halves the spatial grid with 2x2 stride-2 average pooling and zero-pads
    the new channels, keeping downstream shapes valid.
    """
    in_channels: int
    out_channels: int

    def parameters(self) -> list[Parameter]:
        return []

    @property
    def is_downsampling(self) -> bool:
        return True


Block = Union[BlockParams, PoolPadBlock]


@dataclass
class ResNetModel:
    spec: ResNetSpec
    initial_conv: Parameter
    stages: list[list[Block]]
    final_bn: BNParams
    fc_weight: Parameter
    fc_bias: Parameter
    dtype: np.dtype = np.dtype(np.float32)

    def parameters(self) -> list[Parameter]:
        """All parameters in a stable order, running statistics included."""
        out = [self.initial_conv]
        for stage in self.stages:
            for block in stage:
                out.extend(block.parameters())
        out.extend(self.final_bn.parameters())
        out.extend([self.fc_weight, self.fc_bias])
        return out

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def num_trainable(self) -> int:
        return sum(p.value.size for p in self.trainable_parameters())


@dataclass
class BlockRecord:
    """Per-block norms from one forward pass: batch means of per-example
    flattened L2 norms of the block input Y and residual update G = h*F."""
    stage: int
    index: int
    norm_y: float
    norm_g: float


@dataclass
class ForwardTrace:
    """Eval-mode forward with intermediates kept for analysis."""
    logits: Tensor
    records: list[BlockRecord]
    stage_outputs: list[Tensor]
    block_inputs: list[list[Tensor]]
    block_updates: list[list[Tensor | None]]


def _he_normal(rng: np.random.Generator, shape: tuple, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape, dtype=np.float64) * std).astype(dtype)


def _make_bn(name: str, channels: int, dtype) -> BNParams:
    return BNParams(
        gamma=Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype)),
        beta=Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype)),
        running_mean=Parameter(f"{name}.running_mean",
                               np.zeros(channels, dtype=dtype), trainable=False),
        running_var=Parameter(f"{name}.running_var",
                              np.ones(channels, dtype=dtype), trainable=False),
    )


def _block_plan(spec: ResNetSpec) -> Iterable[tuple[int, int, int, int, bool]]:
    """Yield (stage, index, in_channels, out_channels, is_downsampling)."""
    f = spec.filters
    for s, m in enumerate(spec.blocks_per_stage):
        for i in range(m):
            down = s > 0 and i == 0
            cin = f[s - 1] if down else f[s]
            yield s, i, cin, f[s], down


def build_model(spec: ResNetSpec, seed: int, dtype=np.float32) -> ResNetModel:
    """Construct a freshly initialized model.

    Convolutions get He fan-in normal weights drawn in float64 from
    ``np.random.default_rng(seed)`` then cast, so the same seed gives a
    bit-identical model at a given dtype. Batchnorm starts at the
    identity (gamma 1, beta 0, running mean 0, running var 1); the
    classifier bias starts at zero.
    """
    if spec.input_hw % 4 != 0:
        raise ValueError(
            f"input_hw {spec.input_hw} not divisible by 4: "
            "the two downsampling stages each halve the grid")
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    f = spec.filters
    initial = Parameter("initial_conv",
                        _he_normal(rng, (f[0], spec.input_channels, 3, 3), dtype))
    stages: list[list[Block]] = [[] for _ in range(3)]
    for s, i, cin, cout, down in _block_plan(spec):
        name = f"stage{s}.block{i}"
        proj = None
        if down:
            proj = Parameter(f"{name}.shortcut", _he_normal(rng, (cout, cin, 1, 1), dtype))
        stages[s].append(BlockParams(
            bn1=_make_bn(f"{name}.bn1", cin, dtype),
            conv1=Parameter(f"{name}.conv1", _he_normal(rng, (cout, cin, 3, 3), dtype)),
            bn2=_make_bn(f"{name}.bn2", cout, dtype),
            conv2=Parameter(f"{name}.conv2", _he_normal(rng, (cout, cout, 3, 3), dtype)),
            is_downsampling=down,
            shortcut_projection=proj,
        ))
    final_bn = _make_bn("final_bn", f[2], dtype)
    fc_w = Parameter("classifier.weight", _he_normal(rng, (f[2], spec.num_classes), dtype))
    fc_b = Parameter("classifier.bias", np.zeros(spec.num_classes, dtype=dtype))
    return ResNetModel(spec=spec, initial_conv=initial, stages=stages,
                       final_bn=final_bn, fc_weight=fc_w, fc_bias=fc_b, dtype=dtype)


def _poolpad_forward(y: Tensor, block: PoolPadBlock) -> Tensor:
    n, c, h, w = y.data.shape
    if c != block.in_channels:
        raise ShapeError(f"pool-pad block expects {block.in_channels} channels, got {c}")
    pooled = 0.25 * (y.data[:, :, 0::2, 0::2] + y.data[:, :, 0::2, 1::2]
                     + y.data[:, :, 1::2, 0::2] + y.data[:, :, 1::2, 1::2])
    extra = block.out_channels - c
    out = np.concatenate(
        [pooled, np.zeros((n, extra) + pooled.shape[2:], dtype=y.data.dtype)], axis=1)
    return Tensor(out)


def block_forward(y: Tensor, block: Block, h: float, mode: str,
                  update_running: bool = True) -> tuple[Tensor, Tensor | None]:
    """One residual step. Returns (Y_next, G) where G = h * F(Y).

    For a pool-pad stand-in there is no residual branch and G is None.
    """
    if isinstance(block, PoolPadBlock):
        return _poolpad_forward(y, block), None
    if y.data.shape[1] != block.in_channels:
        label = block.conv1.name.rsplit(".", 1)[0]
        raise ShapeError(f"{label} expects {block.in_channels} input channels, "
                         f"got {y.data.shape[1]}")
    stride = 2 if block.is_downsampling else 1
    a = ops.relu(ops.batchnorm(y, block.bn1.gamma.value, block.bn1.beta.value,
                               block.bn1.running_mean.value, block.bn1.running_var.value,
                               mode=mode, update_running=update_running))
    b = ops.conv2d(a, block.conv1.value, stride=stride, padding=1)
    c = ops.relu(ops.batchnorm(b, block.bn2.gamma.value, block.bn2.beta.value,
                               block.bn2.running_mean.value, block.bn2.running_var.value,
                               mode=mode, update_running=update_running))
    f = ops.conv2d(c, block.conv2.value, stride=1, padding=1)
    g = ops.scale(f, h) if h != 1.0 else f
    if block.is_downsampling:
        shortcut = ops.conv2d(y, block.shortcut_projection.value, stride=2, padding=0)
    else:
        shortcut = y
    return ops.add(shortcut, g), g


def _batch_mean_norm(x: np.ndarray) -> float:
    flat = x.reshape(x.shape[0], -1).astype(np.float64)
    return float(np.sqrt((flat ** 2).sum(axis=1)).mean())


def _run(model: ResNetModel, batch, mode: str, collect: bool):
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=model.dtype))
    if x.data.ndim != 4 or x.data.shape[1] != model.spec.input_channels:
        raise ShapeError(
            f"expected (N, {model.spec.input_channels}, H, W) input, got {x.data.shape}")
    h = model.spec.effective_h
    y = ops.conv2d(x, model.initial_conv.value, stride=1, padding=1)
    records: list[BlockRecord] = []
    stage_outputs: list[Tensor] = []
    block_inputs: list[list[Tensor]] = []
    block_updates: list[list[Tensor | None]] = []
    for s, stage in enumerate(model.stages):
        ins: list[Tensor] = []
        ups: list[Tensor | None] = []
        for i, block in enumerate(stage):
            if collect:
                ins.append(y)
            norm_y = _batch_mean_norm(y.data)
            y, g = block_forward(y, block, h, mode)
            norm_g = _batch_mean_norm(g.data) if g is not None else 0.0
            records.append(BlockRecord(stage=s, index=i, norm_y=norm_y, norm_g=norm_g))
            if collect:
                ups.append(g)
        stage_outputs.append(y)
        block_inputs.append(ins)
        block_updates.append(ups)
    z = ops.relu(ops.batchnorm(y, model.final_bn.gamma.value, model.final_bn.beta.value,
                               model.final_bn.running_mean.value,
                               model.final_bn.running_var.value, mode=mode))
    pooled = ops.global_avg_pool(z)
    logits = ops.linear(pooled, model.fc_weight.value, model.fc_bias.value)
    return logits, records, stage_outputs, block_inputs, block_updates


def forward(model: ResNetModel, batch, mode: str = "train") -> tuple[Tensor, list[BlockRecord]]:
    """Full forward pass: initial conv, three stages, bn-relu-pool-linear head.

    mode "train" uses batch statistics and updates running buffers; mode
    "eval" is a pure function of the inputs and parameters.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    logits, records, _, _, _ = _run(model, batch, mode, collect=False)
    return logits, records


def forward_collect(model: ResNetModel, batch) -> ForwardTrace:
    """Eval-mode forward keeping every block input, update, and stage output."""
    logits, records, souts, bins, bups = _run(model, batch, "eval", collect=True)
    return ForwardTrace(logits=logits, records=records, stage_outputs=souts,
                        block_inputs=bins, block_updates=bups)


def evaluate(model: ResNetModel, batches) -> float:
    """Classification error rate (fraction wrong) over an (x, y) batch iterable."""
    wrong = 0
    total = 0
    for xb, yb in batches:
        logits, _ = forward(model, xb, mode="eval")
        pred = logits.data.argmax(axis=1)
        wrong += int((pred != np.asarray(yb)).sum())
        total += len(yb)
    if total == 0:
        raise ValueError("evaluate: no examples")
    return wrong / total


def param_shapes(spec: ResNetSpec) -> list[tuple[str, tuple]]:
    """Trainable parameter names and shapes, by pure arithmetic (no build)."""
    f = spec.filters
    shapes: list[tuple[str, tuple]] = [
        ("initial_conv", (f[0], spec.input_channels, 3, 3))]
    for s, i, cin, cout, down in _block_plan(spec):
        name = f"stage{s}.block{i}"
        shapes.append((f"{name}.bn1.gamma", (cin,)))
        shapes.append((f"{name}.bn1.beta", (cin,)))
        shapes.append((f"{name}.conv1", (cout, cin, 3, 3)))
        shapes.append((f"{name}.bn2.gamma", (cout,)))
        shapes.append((f"{name}.bn2.beta", (cout,)))
        shapes.append((f"{name}.conv2", (cout, cout, 3, 3)))
        if down:
            shapes.append((f"{name}.shortcut", (cout, cin, 1, 1)))
    shapes.append(("final_bn.gamma", (f[2],)))
    shapes.append(("final_bn.beta", (f[2],)))
    shapes.append(("classifier.weight", (f[2], spec.num_classes)))
    shapes.append(("classifier.bias", (spec.num_classes,)))
    return shapes


def count_params(spec: ResNetSpec) -> int:
    """Number of trainable scalars in a model built from ``spec``."""
    return sum(int(np.prod(shape)) for _, shape in param_shapes(spec))
