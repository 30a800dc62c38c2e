"""Differentiable operations over :class:`~odenet.tensor.Tensor`.

Every public op computes its forward value eagerly, then (if a tape is
active) records a closure that maps the output gradient to input
gradient contributions via :func:`~odenet.tensor.accumulate`.

Convolution has two forward backends:

- ``im2col`` (default): patches are gathered into a matrix and the whole
  convolution becomes one batched BLAS matmul. This is the fast path and
  the one training uses.
- ``direct``: a plain nested loop in a fixed accumulation order
  (input channel, then kernel row, then kernel column). It exists as a
  slow reference whose floating-point result is reproducible term by
  term, so tests can pin it bitwise against an independent loop oracle.

Both backends share the same analytic gradient (im2col algebra).
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, accumulate, record

__all__ = [
    "conv2d", "conv2d_direct", "set_conv_backend", "conv_backend",
    "batchnorm", "relu", "add", "scale", "global_avg_pool", "linear",
    "softmax_cross_entropy", "im2col", "col2im",
]

_CONV_BACKENDS = ("im2col", "direct")
_conv_backend = "im2col"


def set_conv_backend(name: str) -> None:
    global _conv_backend
    if name not in _CONV_BACKENDS:
        raise ValueError(f"unknown conv backend {name!r}; choose from {_CONV_BACKENDS}")
    _conv_backend = name


def conv_backend() -> str:
    return _conv_backend


def _conv_out_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} with stride {stride}, padding {padding} "
            f"does not fit a {h}x{w} input")
    return oh, ow


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Gather conv patches of (N, C, H, W) into (N, C*kh*kw, OH*OW).

    kh*kw strided slice copies; no per-patch Python loop.
    """
    n, c, h, w = x.shape
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, di, dj] = x[:, :, di:di + stride * oh:stride,
                                   dj:dj + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int,
           stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch columns back to image layout."""
    n, c, h, w = x_shape
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    for di in range(kh):
        for dj in range(kw):
            out[:, :, di:di + stride * oh:stride,
                dj:dj + stride * ow:stride] += cols6[:, :, di, dj]
    if padding:
        out = out[:, :, padding:hp - padding, padding:wp - padding]
    return np.ascontiguousarray(out)


def conv2d_direct(x: np.ndarray, kernel: np.ndarray, stride: int = 1,
                  padding: int = 0) -> np.ndarray:
    """Reference convolution forward: explicit loops, fixed accumulation order.

    For each output element the sum runs over input channel, then kernel
    row, then kernel column, added one product at a time. Slow; used only
    for bitwise comparison in tests.
    """
    n, cin, h, w = x.shape
    cout, cink, kh, kw = kernel.shape
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for co in range(cout):
        for ci in range(cin):
            for di in range(kh):
                for dj in range(kw):
                    patch = x[:, ci, di:di + stride * oh:stride,
                              dj:dj + stride * ow:stride]
                    out[:, co] += kernel[co, ci, di, dj] * patch
    return out


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2d cross-correlation of (N, Cin, H, W) with (Cout, Cin, kh, kw). No bias."""
    n, cin, h, w = x.data.shape
    cout, cink, kh, kw = kernel.data.shape
    if cin != cink:
        raise ShapeError(
            f"conv2d: input has {cin} channels but kernel expects {cink} "
            f"(input {x.data.shape}, kernel {kernel.data.shape})")
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, padding)
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    if _conv_backend == "direct":
        out = Tensor(conv2d_direct(x.data, kernel.data, stride, padding))
    else:
        cols = im2col(x.data, kh, kw, stride, padding)
        out = Tensor(np.matmul(wmat, cols).reshape(n, cout, oh, ow))

    def backward(g: np.ndarray) -> None:
        gmat = g.reshape(n, cout, oh * ow)
        # patches are recomputed rather than cached: one extra gather per
        # backward keeps activation memory flat across deep models
        cols = im2col(x.data, kh, kw, stride, padding)
        dw = np.tensordot(gmat, cols, axes=([0, 2], [0, 2]))
        accumulate(kernel, dw.reshape(kernel.data.shape))
        dcols = np.matmul(wmat.T, gmat)
        accumulate(x, col2im(dcols, x.data.shape, kh, kw, stride, padding))

    record(out, backward)
    return out


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor,
              running_mean: Tensor, running_var: Tensor,
              mode: str = "train", epsilon: float = 1e-5,
              running_momentum: float = 0.9,
              update_running: bool = True) -> Tensor:
    """Per-channel batch normalization over (N, C, H, W).

    Train mode normalizes by batch statistics (variance is the biased,
    divide-by-n estimate) and folds them into the running buffers with an
    exponential moving average: ``r <- 0.9 r + 0.1 batch_stat``. Eval mode
    normalizes by the running buffers and never mutates them.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm: unknown mode {mode!r}")
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm expects (N, C, H, W), got {x.data.shape}")
    n_, c, h, w = x.data.shape
    if gamma.data.shape != (c,):
        raise ShapeError(f"batchnorm: gamma shape {gamma.data.shape} vs {c} channels")
    bcast = (1, c, 1, 1)
    count = n_ * h * w

    if mode == "train":
        if count < 2:
            raise ShapeError(
                f"batchnorm train mode needs at least 2 values per channel, got {count}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_running:
            m = running_momentum
            running_mean.data[:] = m * running_mean.data + (1.0 - m) * mean
            running_var.data[:] = m * running_var.data + (1.0 - m) * var
    else:
        mean = running_mean.data
        var = running_var.data

    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = (x.data - mean.reshape(bcast)) * inv.reshape(bcast)
    out = Tensor(gamma.data.reshape(bcast) * xhat + beta.data.reshape(bcast))

    def backward(g: np.ndarray) -> None:
        accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        accumulate(beta, g.sum(axis=(0, 2, 3)))
        gs = g * gamma.data.reshape(bcast)
        if mode == "train":
            # batch stats depend on x, so the gradient carries the usual
            # mean / projection corrections
            dx = inv.reshape(bcast) * (
                gs
                - gs.mean(axis=(0, 2, 3)).reshape(bcast)
                - xhat * (gs * xhat).mean(axis=(0, 2, 3)).reshape(bcast))
        else:
            dx = gs * inv.reshape(bcast)
        accumulate(x, dx)

    record(out, backward)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def backward(g: np.ndarray) -> None:
        accumulate(x, g * (x.data > 0))

    record(out, backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly (no broadcasting)."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)

    def backward(g: np.ndarray) -> None:
        accumulate(a, g)
        accumulate(b, g)

    record(out, backward)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar (the residual step size, typically)."""
    out = Tensor(x.data * c)

    def backward(g: np.ndarray) -> None:
        accumulate(x, g * c)

    record(out, backward)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C), spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (N, C, H, W), got {x.data.shape}")
    n, c, h, w = x.data.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def backward(g: np.ndarray) -> None:
        accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape))

    record(out, backward)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: (N, D) @ (D, K) + (K,)."""
    if x.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(
            f"linear: input {x.data.shape} incompatible with weight {weight.data.shape}")
    out = Tensor(x.data @ weight.data + bias.data)

    def backward(g: np.ndarray) -> None:
        accumulate(x, g @ weight.data.T)
        accumulate(weight, x.data.T @ g)
        accumulate(bias, g.sum(axis=0))

    record(out, backward)
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Computed through a shifted log-sum-exp so large logits cannot
    overflow. Returns a scalar tensor.
    """
    n, k = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match {n} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"label {bad} out of range for {k} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    out = Tensor(np.asarray(-logp[rows, labels].mean(), dtype=logits.data.dtype))

    def backward(g: np.ndarray) -> None:
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        accumulate(logits, (float(g) / n) * p)

    record(out, backward)
    return out
