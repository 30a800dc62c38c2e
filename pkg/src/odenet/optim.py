"""SGD with momentum, plus a finite-difference gradient checker."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DivergenceError
from .tensor import Parameter, Tape, Tensor, zero_grads

__all__ = ["sgd_step", "zero_grads", "grad_check", "GradCheckReport"]


def sgd_step(params: Sequence[Parameter], lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0) -> None:
    """One in-place update:

        v <- momentum * v + g + weight_decay * w
        w <- w - lr * v

    Weight decay enters the velocity, not the raw step, so with
    momentum=0 and weight_decay=0 this reduces exactly to w -= lr * g.
    Parameters flagged non-trainable are skipped; a NaN gradient aborts
    with the offending parameter named.
    """
    for p in params:
        if not p.trainable:
            continue
        g = p.value.grad
        if g is None:
            raise ValueError(f"sgd_step: parameter {p.name!r} has no gradient")
        if np.isnan(g).any():
            raise DivergenceError(f"NaN gradient in parameter {p.name!r}")
        buf = p.momentum_buffer.data
        if weight_decay != 0.0:
            g = g + weight_decay * p.value.data
        buf *= momentum
        buf += g
        p.value.data -= lr * buf


@dataclass
class GradCheckReport:
    """Worst relative disagreement between analytic and numeric gradients."""
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float] = field(default_factory=dict)

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def grad_check(model_fn: Callable, params: Sequence[Parameter], inputs,
               fd_step: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    ``model_fn(inputs)`` must return a scalar loss Tensor computed from the
    current values of ``params``. Every element of every trainable
    parameter is perturbed by +-fd_step (so run this on small models, in
    float64). The relative error per element is
    ``|a - n| / max(|a|, |n|, 1e-8)``.

    Forward passes that maintain running statistics shift them as a side
    effect; those buffers are snapshotted on entry and restored on exit,
    and since they never feed back into a train-mode loss the check
    itself is unaffected.
    """
    frozen = [(p, p.value.data.copy()) for p in params if not p.trainable]
    try:
        with Tape() as tape:
            loss = model_fn(inputs)
        tape.backward(loss)
        analytic = {}
        for p in params:
            if p.trainable:
                if p.value.grad is None:
                    raise ValueError(f"grad_check: {p.name!r} received no gradient")
                analytic[p.name] = p.value.grad.copy()
        zero_grads([p for p in params])

        def loss_value() -> float:
            out = model_fn(inputs)
            return out.data.item()

        worst, worst_name = 0.0, ""
        per_param: dict[str, float] = {}
        for p in params:
            if not p.trainable:
                continue
            flat = p.value.data.reshape(-1)
            aflat = analytic[p.name].reshape(-1)
            pmax = 0.0
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + fd_step
                up = loss_value()
                flat[i] = keep - fd_step
                down = loss_value()
                flat[i] = keep
                numeric = (up - down) / (2 * fd_step)
                a = float(aflat[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                if err > pmax:
                    pmax = err
            per_param[p.name] = pmax
            if pmax > worst:
                worst, worst_name = pmax, p.name
        return GradCheckReport(worst, worst_name, per_param)
    finally:
        for p, saved in frozen:
            p.value.data[...] = saved
