"""Independent reference implementations used to check the engine.

Everything here is written the dumbest defensible way: scalar loops,
direct formulas, high-precision arithmetic where it is cheap. Nothing
imports from odenet's op implementations, so agreement between the two
is evidence rather than tautology.
"""
from __future__ import annotations

import numpy as np
from mpmath import mp


def conv2d_loop(x: np.ndarray, kernel: np.ndarray, stride: int = 1,
                padding: int = 0) -> np.ndarray:
    """Four nested loops per output element, accumulating one product at a
    time over (input channel, kernel row, kernel column) in that order."""
    n, cin, h, w = x.shape
    cout, cink, kh, kw = kernel.shape
    assert cin == cink
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if padding:
        xp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x
        x = xp
    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for b in range(n):
        for co in range(cout):
            for oi in range(oh):
                for oj in range(ow):
                    acc = x.dtype.type(0)
                    for ci in range(cin):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += kernel[co, ci, di, dj] * \
                                    x[b, ci, oi * stride + di, oj * stride + dj]
                    out[b, co, oi, oj] = acc
    return out


def batchnorm_train_loop(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                         eps: float = 1e-5) -> np.ndarray:
    """Scalar-formula batchnorm over (N, C, H, W) with biased variance."""
    n, c, h, w = x.shape
    out = np.empty_like(x)
    for ch in range(c):
        vals = x[:, ch].reshape(-1)
        mean = vals.sum() / vals.size
        var = ((vals - mean) ** 2).sum() / vals.size
        out[:, ch] = gamma[ch] * (x[:, ch] - mean) / np.sqrt(var + eps) + beta[ch]
    return out


def softmax_ce_mp(logits, label: int, dps: int = 50) -> float:
    """Cross-entropy of one row computed at `dps` decimal digits."""
    with mp.workdps(dps):
        zs = [mp.mpf(repr(float(v))) for v in logits]
        m = max(zs)
        lse = m + mp.log(mp.fsum(mp.e ** (z - m) for z in zs))
        return float(lse - zs[label])


def sgd_sequence(w0: float, grads, lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
    """Scalar momentum-SGD recurrence; returns the weight after each step."""
    w, v, out = w0, 0.0, []
    for g in grads:
        v = momentum * v + g + weight_decay * w
        w = w - lr * v
        out.append(w)
    return out


def fd_gradient(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f at x, elementwise."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        up = f(x)
        flat[i] = keep - eps
        down = f(x)
        flat[i] = keep
        gflat[i] = (up - down) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, 1e-8)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float((np.abs(a - b) / denom).max())


def l2_norm_per_example(x: np.ndarray) -> np.ndarray:
    """Flatten each leading-axis slice and take its euclidean norm."""
    flat = x.reshape(x.shape[0], -1).astype(np.float64)
    return np.sqrt((flat ** 2).sum(axis=1))
