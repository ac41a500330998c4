"""Minimal reverse-mode automatic differentiation over NCHW numpy arrays.

Just enough ops for the networks this package builds: float convolution,
linear, batchnorm, relu, pooling, concat and softmax cross-entropy, plus the
softmax/log/sum pieces the architecture-search objective needs.  A forward
pass builds a DAG of ``Var`` nodes; ``backward`` walks it once in reverse
topological order and accumulates gradients (+=) into the leaves, so calling
it twice without zeroing doubles every leaf gradient.

Ops are dtype-generic: networks run in float32, gradient checks may feed
float64 through the same code.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, GeometryError
from .tensorops import (
    conv_out_hw,
    lower_conv_patches,
    pad_nchw,
    rows_to_weight,
    scatter_conv_patches,
    weight_rows,
    _patch_windows,
)


class Var:
    """A node of the tape: an array plus how to push gradients to parents."""

    __slots__ = ("data", "grad", "parents", "vjp", "requires_grad")

    def __init__(self, data, parents=(), vjp=None, requires_grad=None):
        self.data = np.asarray(data)
        self.parents = tuple(parents)
        self.vjp = vjp
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None


class Parameter(Var):
    """A learnable leaf: value, accumulated gradient, momentum buffer."""

    __slots__ = ("momentum", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(np.ascontiguousarray(data), requires_grad=True)
        self.momentum = np.zeros_like(self.data)
        self.name = name


def backward(loss: Var) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable requires-grad leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    topo: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] += pg
            else:
                grads[key] = pg


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (adjoint of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / shape ops


def add(a: Var, b: Var) -> Var:
    out = a.data + b.data

    def vjp(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        )

    return Var(out, (a, b), vjp)


def mul(a: Var, b: Var) -> Var:
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
        )

    return Var(out, (a, b), vjp)


def scale(a: Var, s: float) -> Var:
    return Var(a.data * s, (a,), lambda g: (g * s,))


def sub(a: Var, b: Var) -> Var:
    return add(a, scale(b, -1.0))


def relu(x: Var) -> Var:
    mask = x.data > 0
    return Var(x.data * mask, (x,), lambda g: (g * mask,))


def logv(x: Var) -> Var:
    out = np.log(x.data)
    return Var(out, (x,), lambda g: (g / x.data,))


def sum_all(x: Var) -> Var:
    return Var(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.data.shape),))


def reshape(x: Var, shape) -> Var:
    old = x.data.shape
    return Var(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x: Var) -> Var:
    return reshape(x, (x.data.shape[0], -1))


def concat_channels(xs: list[Var]) -> Var:
    datas = [x.data for x in xs]
    base = datas[0].shape
    for d in datas[1:]:
        if d.shape[0] != base[0] or d.shape[2:] != base[2:]:
            raise GeometryError(
                f"concat inputs disagree outside the channel axis: "
                f"{[tuple(d.shape) for d in datas]}"
            )
    out = np.concatenate(datas, axis=1)
    splits = np.cumsum([d.shape[1] for d in datas])[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=1)
        return [p if x.requires_grad else None for p, x in zip(pieces, xs)]

    return Var(out, tuple(xs), vjp)


def pad_channels(x: Var, total_channels: int) -> Var:
    n, c, h, w = x.data.shape
    if total_channels < c:
        raise GeometryError(f"cannot pad {c} channels down to {total_channels}")
    if total_channels == c:
        return x
    out = np.zeros((n, total_channels, h, w), dtype=x.data.dtype)
    out[:, :c] = x.data
    return Var(out, (x,), lambda g: (np.ascontiguousarray(g[:, :c]),))


# ---------------------------------------------------------------------------
# dense layers


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise GeometryError(
            f"linear expects (N,F) x (O,F), got {x.data.shape} x {w.data.shape}"
        )
    out = x.data @ w.data.T
    parents = [x, w]
    if b is not None:
        out = out + b.data
        parents.append(b)

    def vjp(g):
        grads = [
            g @ w.data if x.requires_grad else None,
            g.T @ x.data if w.requires_grad else None,
        ]
        if b is not None:
            grads.append(g.sum(axis=0) if b.requires_grad else None)
        return grads

    return Var(out, tuple(parents), vjp)


def conv2d(
    x: Var, w: Var, stride: int = 1, dilation: int = 1, padding: int = 0
) -> Var:
    """Float NCHW convolution, weight layout (F, C, kh, kw), no bias.

    The patch matrix is recomputed in backward rather than saved: it is by
    far the largest temporary of a conv and graphs hold many of them."""
    n, c, h, wd = x.data.shape
    f, cw, kh, kw = w.data.shape
    if cw != c:
        raise GeometryError(f"conv weight expects {cw} input channels, input has {c}")
    cols, (oh, ow) = lower_conv_patches(x.data, (kh, kw), stride, dilation, padding)
    w2d = weight_rows(w.data)
    out = np.ascontiguousarray(
        (cols @ w2d.T).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    )
    del cols

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, f)
        gx = None
        if x.requires_grad:
            gx = scatter_conv_patches(
                g2 @ w2d, x.data.shape, (kh, kw), stride, dilation, padding
            )
        gw = None
        if w.requires_grad:
            cols2, _ = lower_conv_patches(x.data, (kh, kw), stride, dilation, padding)
            gw = rows_to_weight(g2.T @ cols2, w.data.shape)
        return gx, gw

    return Var(out, (x, w), vjp)


def depthwise_conv2d(
    x: Var, w: Var, stride: int = 1, dilation: int = 1, padding: int = 0
) -> Var:
    """Per-channel float convolution, weight layout (C, kh, kw)."""
    n, c, h, wd = x.data.shape
    cw, kh, kw = w.data.shape
    if cw != c:
        raise GeometryError(f"depthwise weight has {cw} channels, input has {c}")
    oh, ow = conv_out_hw(h, wd, (kh, kw), stride, dilation, padding)
    xp = pad_nchw(x.data, padding)
    win = _patch_windows(xp, (kh, kw), stride, dilation)
    out = np.einsum("nchwij,cij->nchw", win, w.data, optimize=True)

    def vjp(g):
        gx = None
        if x.requires_grad:
            gp = g[:, :, :, :, None, None] * w.data[None, :, None, None, :, :]
            gx = _fold_windows(gp, x.data.shape, (kh, kw), stride, dilation, padding)
        gw = (
            np.einsum("nchwij,nchw->cij", win, g, optimize=True)
            if w.requires_grad
            else None
        )
        return gx, gw

    return Var(out, (x, w), vjp)


def _fold_windows(gp, x_shape, kernel, stride, dilation, padding):
    """Fold (N,C,OH,OW,kh,kw) tap gradients back onto the (padded) input."""
    n, c, h, w = x_shape
    kh, kw = kernel
    oh, ow = gp.shape[2], gp.shape[3]
    xg = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gp.dtype)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            xg[:, :, hi : hi + oh * stride : stride, wj : wj + ow * stride : stride] += gp[
                :, :, :, :, i, j
            ]
    if padding:
        xg = xg[:, :, padding : padding + h, padding : padding + w]
    return xg


# ---------------------------------------------------------------------------
# batchnorm


def batchnorm2d(
    x: Var,
    gamma: Var | None,
    beta: Var | None,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Var:
    """Channelwise batchnorm; train mode updates the running statistics
    in place (the one stateful side effect of a forward pass)."""
    n, c, h, w = x.data.shape
    if training:
        cnt = n * h * w
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * (cnt / max(1, cnt - 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat
    parents: list[Var] = [x]
    if gamma is not None:
        out = out * gamma.data[None, :, None, None]
        parents.append(gamma)
    if beta is not None:
        out = out + beta.data[None, :, None, None]
        parents.append(beta)

    def vjp(g):
        gscaled = g if gamma is None else g * gamma.data[None, :, None, None]
        if x.requires_grad:
            if training:
                cnt = n * h * w
                sum_g = gscaled.sum(axis=(0, 2, 3))
                sum_gx = (gscaled * xhat).sum(axis=(0, 2, 3))
                gx = (
                    inv_std[None, :, None, None]
                    / cnt
                    * (cnt * gscaled - sum_g[None, :, None, None] - xhat * sum_gx[None, :, None, None])
                )
            else:
                gx = gscaled * inv_std[None, :, None, None]
        else:
            gx = None
        grads = [gx]
        if gamma is not None:
            grads.append(
                (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            )
        if beta is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if beta.requires_grad else None)
        return grads

    return Var(out, tuple(parents), vjp)


# ---------------------------------------------------------------------------
# pooling

_count_cache: dict[tuple, np.ndarray] = {}


def _pool_counts(h, w, kernel, stride, padding):
    """Valid-tap counts per output position (padding excluded from the mean)."""
    key = (h, w, kernel, stride, padding)
    got = _count_cache.get(key)
    if got is None:
        ones = np.ones((1, 1, h, w))
        win = _patch_windows(pad_nchw(ones, padding), (kernel, kernel), stride, 1)
        got = win.sum(axis=(-1, -2))[0, 0]
        _count_cache[key] = got
    return got


def _pool_views(xp, kernel, stride, oh, ow):
    views = []
    for i in range(kernel):
        for j in range(kernel):
            views.append(xp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride])
    return views


def maxpool2d(x: Var, kernel: int = 3, stride: int = 1, padding: int = 1) -> Var:
    """Max pool; gradient goes to the first maximal tap in row-major order."""
    n, c, h, w = x.data.shape
    oh, ow = conv_out_hw(h, w, (kernel, kernel), stride, 1, padding)
    xp = pad_nchw(x.data, padding, value=-np.inf)
    views = _pool_views(xp, kernel, stride, oh, ow)
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def vjp(g):
        gp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        gviews = _pool_views(gp, kernel, stride, oh, ow)
        taken = np.zeros(out.shape, dtype=bool)
        for v, gv in zip(views, gviews):
            mask = (v == out) & ~taken
            gv += g * mask
            taken |= mask
        if padding:
            gp = gp[:, :, padding : padding + h, padding : padding + w]
        return (np.ascontiguousarray(gp),)

    return Var(out, (x,), vjp)


def avgpool2d(x: Var, kernel: int = 3, stride: int = 1, padding: int = 1) -> Var:
    """Average pool over the valid taps only, so constants stay constant at
    the borders."""
    n, c, h, w = x.data.shape
    oh, ow = conv_out_hw(h, w, (kernel, kernel), stride, 1, padding)
    counts = _pool_counts(h, w, kernel, stride, padding).astype(x.data.dtype)
    xp = pad_nchw(x.data, padding)
    views = _pool_views(xp, kernel, stride, oh, ow)
    out = views[0].copy()
    for v in views[1:]:
        out += v
    out /= counts

    def vjp(g):
        gn = g / counts
        gp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        for gv in _pool_views(gp, kernel, stride, oh, ow):
            gv += gn
        if padding:
            gp = gp[:, :, padding : padding + h, padding : padding + w]
        return (np.ascontiguousarray(gp),)

    return Var(out, (x,), vjp)


def global_avgpool(x: Var) -> Var:
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy(),)

    return Var(out, (x,), vjp)


# ---------------------------------------------------------------------------
# softmax & losses


def softmax(x: Var, axis: int = -1) -> Var:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Var(p, (x,), vjp)


def softmax_cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    if logits.data.ndim != 2:
        raise GeometryError(f"logits must be (N, K), got {logits.data.shape}")
    labels = np.asarray(labels)
    n = logits.data.shape[0]
    if labels.shape != (n,):
        raise GeometryError(f"labels shape {labels.shape} does not match batch {n}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean()
    p = np.exp(logp)

    def vjp(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return Var(np.asarray(loss), (logits,), vjp)


def weighted_sum(table: Var, row: int, terms: list[Var | None]) -> Var:
    """sum_o table[row, o] * terms[o], with ``None`` terms treated as exact
    zero tensors (their weight's gradient is exactly zero, so no compute)."""
    weights = table.data[row]
    live = [(o, t) for o, t in enumerate(terms) if t is not None]
    if not live:
        raise ContractError("weighted_sum needs at least one non-zero term")
    out = np.zeros_like(live[0][1].data)
    for o, t in live:
        out += weights[o] * t.data

    def vjp(g):
        grads: list[np.ndarray | None] = []
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            for o, t in live:
                gt[row, o] = float((g * t.data).sum())
            grads.append(gt)
        else:
            grads.append(None)
        for o, t in live:
            grads.append(weights[o] * g if t.requires_grad else None)
        return grads

    return Var(out, tuple([table] + [t for _, t in live]), vjp)
