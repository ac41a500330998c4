"""Independent oracles shared by the test suite.

Everything here is deliberately dumb: nested scalar loops and central finite
differences, kept free of the library's own lowering/packing machinery so it
can serve as the second route of every dual-route check.
"""

from __future__ import annotations

import numpy as np


def naive_conv2d(x, w, stride=1, dilation=1, padding=0):
    """Direct nested-loop convolution, NCHW x (F,C,kh,kw)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, f, oh, ow))
    for b in range(n):
        for fo in range(f):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (
                                    xp[b, ci, i * stride + ki * dilation,
                                       j * stride + kj * dilation]
                                    * w[fo, ci, ki, kj]
                                )
                    out[b, fo, i, j] = acc
    return out


def naive_depthwise_conv2d(x, w, stride=1, dilation=1, padding=0):
    """Per-channel nested-loop convolution, weight layout (C, kh, kw)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    kh, kw = w.shape[1], w.shape[2]
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, c, oh, ow))
    for b in range(n):
        for ci in range(c):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ki in range(kh):
                        for kj in range(kw):
                            acc += (
                                xp[b, ci, i * stride + ki * dilation,
                                   j * stride + kj * dilation]
                                * w[ci, ki, kj]
                            )
                    out[b, ci, i, j] = acc
    return out


def sign_pm1_scalar(v: float) -> float:
    return 1.0 if v >= 0 else -1.0


def eq3_reference(a, w, stride=1, dilation=1, padding=0):
    """Float-arithmetic evaluation of beta K (.) (sign(W) * sign(A)) using
    only scalar loops: the oracle for the bit-packed path."""
    a = np.asarray(a, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    f = w.shape[0]
    beta = np.abs(w.reshape(f, -1)).mean(axis=1)
    d = np.abs(a).mean(axis=1, keepdims=True)
    kh, kw = w.shape[2], w.shape[3]
    avg_kernel = np.full((1, 1, kh, kw), 1.0 / (kh * kw))
    k_map = naive_conv2d(d, avg_kernel, stride, dilation, padding)
    signs_a = np.where(
        np.pad(a, ((0, 0), (0, 0), (padding, padding), (padding, padding))) >= 0,
        1.0, -1.0,
    )
    signs_w = np.where(w >= 0, 1.0, -1.0)
    core = naive_conv2d(signs_a, signs_w, stride, dilation, padding=0)
    return beta[None, :, None, None] * (k_map * core)


def finite_diff(loss_fn, arr, eps=1e-5):
    """Central finite differences of loss_fn() w.r.t. arr, mutated in place."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat, gf = arr.ravel(), g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        fp = loss_fn()
        flat[i] = keep - eps
        fm = loss_fn()
        flat[i] = keep
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def rel_err(analytic, fd):
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    scale = max(np.abs(fd).max(), np.abs(analytic).max(), 1e-8)
    return np.abs(analytic - fd).max() / scale
