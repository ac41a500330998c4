"""XNOR-style 1-bit convolution: sign binarization with per-filter and
per-position scaling, straight-through gradients, and the separable variant
kept for quantization-error analysis.

A binarized convolution approximates ``W * A`` by ``beta K (.) (B * I)``
where ``B = sign(W)``, ``I = sign(A)``, ``beta[f]`` is the mean absolute
value of filter f, and ``K`` is the channel-mean absolute activation run
through a constant averaging kernel with the same geometry as the main conv.

Two interchangeable execution engines compute the core ``B * I``:

* ``popcount`` — packs signs to bit rows and uses XOR + popcount words
  (the deployment arithmetic);
* ``matmul``   — multiplies +-1 float matrices via BLAS (faster here for
  training).

Both produce the same integers, and the scale multiplication is shared, so
their float outputs are bitwise identical; tests pin that equality.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Var
from .errors import ContractError, GeometryError
from .tensorops import (
    BitTensor,
    conv_out_hw,
    lower_conv_patches,
    pack_bit_rows,
    pack_signs,
    pad_nchw,
    popcount_matmul,
    rows_to_weight,
    sign_pm1,
    weight_rows,
    _patch_windows,
)


def binarize_weights(w: np.ndarray) -> tuple[BitTensor, np.ndarray]:
    """Per-filter binarization: B = sign(W), beta[f] = mean |W[f]|."""
    w = np.asarray(w)
    if w.ndim != 4:
        raise ContractError(f"weights must be 4-d (F,C,kh,kw), got ndim={w.ndim}")
    beta = np.abs(w).mean(axis=(1, 2, 3)).astype(np.float32)
    return pack_signs(w), beta


def abs_channel_mean(a: np.ndarray) -> np.ndarray:
    """D map of the scaling scheme: per-position channel mean of |A|."""
    return np.abs(np.asarray(a)).mean(axis=1, keepdims=True)


def k_map_from_abs_mean(
    d: np.ndarray,
    kernel: tuple[int, int],
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Filter a D map with the constant 1/(kh*kw) kernel at conv geometry."""
    kh, kw = kernel
    conv_out_hw(d.shape[2], d.shape[3], kernel, stride, dilation, padding)
    win = _patch_windows(pad_nchw(d, padding), kernel, stride, dilation)
    k = win.sum(axis=(-1, -2)) / (kh * kw)
    return np.ascontiguousarray(k, dtype=d.dtype)


def activation_scale(
    a: np.ndarray,
    kernel: tuple[int, int],
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """K map: channel-mean |A| filtered by the constant 1/(kh*kw) kernel,
    with the same stride/dilation/padding as the convolution it scales.
    Returns (N, 1, OH, OW), nonnegative everywhere."""
    a = np.asarray(a)
    if a.ndim != 4:
        raise ContractError(f"activations must be 4-d NCHW, got ndim={a.ndim}")
    return k_map_from_abs_mean(abs_channel_mean(a), kernel, stride, dilation, padding)


def ste_backward(grad_out: np.ndarray, pre_sign: np.ndarray) -> np.ndarray:
    """Straight-through estimator for sign: identity clipped to |x| <= 1
    (boundary included)."""
    grad_out = np.asarray(grad_out)
    pre_sign = np.asarray(pre_sign)
    if grad_out.shape != pre_sign.shape:
        raise ContractError(
            f"shape mismatch {grad_out.shape} vs {pre_sign.shape}"
        )
    return grad_out * (np.abs(pre_sign) <= 1.0)


def sign_ste(x: Var) -> Var:
    """Tape op: elementwise sign (+1 at 0) with the STE backward rule."""
    out = sign_pm1(x.data)
    return Var(out, (x,), lambda g: (ste_backward(g, x.data),))


def sign_ste_nhwc(x: Var, padding: int) -> Var:
    """Sign with STE backward, emitted as a zero-padded NHWC buffer.

    The pad ring holds +1 (sign of the zero padding), so every binary conv
    geometry with pad <= ``padding`` can slice its receptive fields straight
    out of this one staged buffer.
    """
    n, c, h, w = x.data.shape
    out = np.empty((n, h + 2 * padding, w + 2 * padding, c), dtype=np.float32)
    if padding:
        out[:, :padding] = 1.0
        out[:, padding + h :] = 1.0
        out[:, padding : padding + h, :padding] = 1.0
        out[:, padding : padding + h, padding + w :] = 1.0
    out[:, padding : padding + h, padding : padding + w, :] = sign_pm1(
        x.data.transpose(0, 2, 3, 1)
    )

    def vjp(g):
        core = g[:, padding : padding + h, padding : padding + w, :]
        return (ste_backward(
            np.ascontiguousarray(core.transpose(0, 3, 1, 2)), x.data
        ),)

    return Var(out, (x,), vjp)


def pad_spatial(x: Var, padding: int, value: float = 0.0) -> Var:
    """Tape op: constant-pad H/W; backward crops the padding ring away."""
    if padding == 0:
        return x
    out = pad_nchw(x.data, padding, value)
    n, c, h, w = x.data.shape

    def vjp(g):
        return (np.ascontiguousarray(g[:, :, padding : padding + h, padding : padding + w]),)

    return Var(out, (x,), vjp)


def _scale_output(s_int, k_map, beta, n, oh, ow):
    """Shared final scaling so every engine produces identical floats.
    Multiplies in the (N, OH, OW, F) layout where rows are contiguous, then
    transposes once to NCHW."""
    f = beta.shape[0]
    s = s_int.reshape(n, oh, ow, f).astype(np.float32, copy=False)
    s = s * k_map.transpose(0, 2, 3, 1)
    s *= beta
    return np.ascontiguousarray(s.transpose(0, 3, 1, 2))


def binary_conv_forward(
    a: np.ndarray,
    w: np.ndarray,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
    engine: str = "popcount",
) -> np.ndarray:
    """beta K (.) (sign(W) * sign(A)) for a post-batchnorm activation ``a``.

    Spatial padding is applied to the float activation before the sign, so
    padded taps enter the bit domain as +1 (sign(0) = +1).
    """
    a = np.asarray(a, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    if a.ndim != 4 or w.ndim != 4:
        raise GeometryError("binary conv expects 4-d activation and weights")
    if not np.isfinite(a).all():
        raise ContractError("binary conv input contains non-finite values")
    n, c, h, wd = a.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise GeometryError(f"weight expects {cw} input channels, input has {c}")
    oh, ow = conv_out_hw(h, wd, (kh, kw), stride, dilation, padding)

    _, beta = binarize_weights(w)
    k_map = activation_scale(a, (kh, kw), stride, dilation, padding)
    signs = sign_pm1(pad_nchw(a, padding))
    cols, _ = lower_conv_patches(signs, (kh, kw), stride, dilation, padding=0)
    w_signs = sign_pm1(weight_rows(w))

    if engine == "popcount":
        bits_a = pack_bit_rows((cols > 0).astype(np.uint8))
        bits_w = pack_bit_rows((w_signs > 0).astype(np.uint8))
        s_int = popcount_matmul(bits_a, bits_w, c * kh * kw)
    elif engine == "matmul":
        s_int = cols @ w_signs.T
    else:
        raise ContractError(f"unknown engine {engine!r}")
    return _scale_output(s_int, k_map, beta, n, oh, ow)


def binary_depthwise_conv_forward(
    a: np.ndarray,
    w: np.ndarray,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Per-channel binary conv: out[c] = beta[c] K (.) (sign(W[c]) * sign(A[c])).

    Weight layout (C, kh, kw); beta[c] is the mean |W[c]| (n = kh*kw for a
    depthwise filter).
    """
    a = np.asarray(a, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    n, c, h, wd = a.shape
    if w.shape[0] != c:
        raise GeometryError(f"depthwise weight has {w.shape[0]} channels, input {c}")
    kh, kw = w.shape[1], w.shape[2]
    beta = np.abs(w).mean(axis=(1, 2)).astype(np.float32)
    k_map = activation_scale(a, (kh, kw), stride, dilation, padding)
    signs = sign_pm1(pad_nchw(a, padding))
    win = _patch_windows(signs, (kh, kw), stride, dilation)
    s_int = np.einsum("nchwij,cij->nchw", win, sign_pm1(w), optimize=True)
    return np.ascontiguousarray(s_int * k_map) * beta[None, :, None, None]


def conv_pad_for(ops_geoms) -> int:
    """Largest spatial pad among (kernel, dilation) geometries: the staging
    pad for one shared sign buffer."""
    return max((d * (k - 1) // 2 for k, d in ops_geoms), default=0)


def binary_separable_conv(
    a: np.ndarray,
    w_depthwise: np.ndarray,
    w_pointwise: np.ndarray,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
    engine: str = "popcount",
) -> np.ndarray:
    """Separable binary conv: the composition of a depthwise and a 1x1 binary
    conv.  The intermediate activation is re-binarized by the second stage,
    nesting two sign/scale approximations (the source of its outsized
    quantization error)."""
    w_pointwise = np.asarray(w_pointwise)
    if w_pointwise.ndim != 4 or w_pointwise.shape[2:] != (1, 1):
        raise GeometryError("pointwise weights must be (F, C, 1, 1)")
    mid = binary_depthwise_conv_forward(a, w_depthwise, stride, dilation, padding)
    return binary_conv_forward(mid, w_pointwise, 1, 1, 0, engine=engine)


# ---------------------------------------------------------------------------
# tape ops used by the trainable layers


def _conv_slices(kernel, stride, dilation, origin, oh, ow):
    """Index expressions of every tap's (N, OH, OW, C) slice in the staged
    sign buffer."""
    kh, kw = kernel
    out = []
    for i in range(kh):
        hi = origin + i * dilation
        for j in range(kw):
            wj = origin + j * dilation
            out.append((
                slice(None),
                slice(hi, hi + oh * stride, stride),
                slice(wj, wj + ow * stride, stride),
                slice(None),
            ))
    return out


def scaled_sign_conv(
    s_nhwc: Var,
    weights: list[Var],
    k_map: np.ndarray,
    kernel: tuple[int, int],
    stride: int,
    dilation: int,
    origin: int = 0,
) -> Var:
    """Binary conv core on a staged sign buffer from sign_ste_nhwc.

    ``origin`` is the buffer offset when the buffer was padded for a larger
    geometry (origin = staged_pad - this_op_pad).  ``weights`` is a list so
    that several filter banks sharing one patch geometry (all ops of one
    source node in a search cell) run as a single BLAS call; outputs are
    concatenated along channels in list order.  beta and K are constants in
    backward; weight gradients pass through the |W| <= 1 clip onto the float
    master weights.

    Two execution strategies produce bitwise-identical results (the +-1
    products are exact integers): a lowered patch matrix for GEMM-friendly
    shapes, or per-tap accumulation when the patch matrix would dwarf the
    activation (huge output grids, few channels, 5x5 taps) and for the pure
    1x1 case.
    """
    n, hp, wp, c = s_nhwc.data.shape
    kh, kw = kernel
    span = dilation * (kh - 1) + 1
    oh = (hp - 2 * origin - span) // stride + 1
    ow = (wp - 2 * origin - dilation * (kw - 1) - 1) // stride + 1
    if oh <= 0 or ow <= 0:
        raise GeometryError("empty binary conv output")
    p = n * oh * ow

    w_rows = np.concatenate([weight_rows(w.data) for w in weights])
    w_signs = sign_pm1(w_rows)
    betas = np.concatenate(
        [np.abs(w.data).mean(axis=(1, 2, 3)) for w in weights]
    ).astype(np.float32)
    f_total = w_signs.shape[0]
    sizes = [w.data.shape[0] for w in weights]
    taps = _conv_slices(kernel, stride, dilation, origin, oh, ow)
    use_taps = kh == 1 or (kh >= 5 and p >= 32768)

    if use_taps:
        w_taps = np.ascontiguousarray(
            w_signs.reshape(f_total, kh, kw, c).transpose(1, 2, 3, 0)
        ).reshape(kh * kw, c, f_total)
        if len(taps) == 1 and stride == 1 and origin == 0:
            s_int = s_nhwc.data.reshape(-1, c) @ w_taps[0]
        else:
            s_int = np.zeros((p, f_total), np.float32)
            for t, sl in enumerate(taps):
                block = np.ascontiguousarray(s_nhwc.data[sl]).reshape(-1, c)
                s_int += block @ w_taps[t]
    else:
        cols = np.empty((n, oh, ow, kh, kw, c), np.float32)
        for t, sl in enumerate(taps):
            cols[:, :, :, t // kw, t % kw, :] = s_nhwc.data[sl]
        s_int = cols.reshape(p, -1) @ w_signs.T
        del cols

    k_t = k_map.transpose(0, 2, 3, 1)
    out_nhwf = s_int.reshape(n, oh, ow, f_total) * k_t
    out_nhwf *= betas
    out = np.ascontiguousarray(out_nhwf.transpose(0, 3, 1, 2))
    del s_int, out_nhwf

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        g2 = g2 * k_t
        g2 *= betas
        g2 = g2.reshape(p, f_total)
        grads: list[np.ndarray | None] = [None]
        if s_nhwc.requires_grad:
            gx = np.zeros((n, hp, wp, c), np.float32)
            if use_taps:
                for t, sl in enumerate(taps):
                    gx[sl] += (g2 @ w_taps[t].T).reshape(n, oh, ow, c)
            else:
                dcols = (g2 @ w_signs).reshape(n, oh, ow, kh, kw, c)
                for t, sl in enumerate(taps):
                    gx[sl] += dcols[:, :, :, t // kw, t % kw, :]
            grads[0] = gx
        if any(w.requires_grad for w in weights):
            gw_rows = np.empty((f_total, kh * kw * c), np.float32)
            for t, sl in enumerate(taps):
                block = np.ascontiguousarray(s_nhwc.data[sl]).reshape(-1, c)
                gw_rows[:, t * c : (t + 1) * c] = g2.T @ block
            lo = 0
            for w, f in zip(weights, sizes):
                if w.requires_grad:
                    gw = rows_to_weight(gw_rows[lo : lo + f], w.data.shape)
                    grads.append(gw * (np.abs(w.data) <= 1.0))
                else:
                    grads.append(None)
                lo += f
        else:
            grads.extend([None] * len(weights))
        return grads

    return Var(out, tuple([s_nhwc] + list(weights)), vjp)


def scaled_sign_depthwise_conv(
    s: Var,
    w: Var,
    k_map: np.ndarray,
    kernel: tuple[int, int],
    stride: int,
    dilation: int,
) -> Var:
    """Depthwise counterpart of scaled_sign_conv; weight layout (C, kh, kw)."""
    signs_w = sign_pm1(w.data)
    beta = np.abs(w.data).mean(axis=(1, 2)).astype(np.float32)
    win = _patch_windows(s.data, kernel, stride, dilation)
    s_int = np.einsum("nchwij,cij->nchw", win, signs_w, optimize=True)
    out = np.ascontiguousarray(s_int * k_map) * beta[None, :, None, None]

    def vjp(g):
        gcore = (g * k_map) * beta[None, :, None, None]
        gs = None
        if s.requires_grad:
            gp = gcore[:, :, :, :, None, None] * signs_w[None, :, None, None, :, :]
            gs = _fold_padded(gp, s.data.shape, kernel, stride, dilation)
        gw = None
        if w.requires_grad:
            gw = np.einsum("nchwij,nchw->cij", win, gcore, optimize=True)
            gw = gw * (np.abs(w.data) <= 1.0)
        return gs, gw

    return Var(out, (s, w), vjp)


def _fold_padded(gp, s_shape, kernel, stride, dilation):
    n, c, h, w = s_shape
    kh, kw = kernel
    oh, ow = gp.shape[2], gp.shape[3]
    xg = np.zeros((n, c, h, w), dtype=gp.dtype)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            xg[:, :, hi : hi + oh * stride : stride, wj : wj + ow * stride : stride] += gp[
                :, :, :, :, i, j
            ]
    return xg


__all__ = [
    "activation_scale",
    "binarize_weights",
    "binary_conv_forward",
    "binary_depthwise_conv_forward",
    "binary_separable_conv",
    "pad_spatial",
    "scaled_sign_conv",
    "sign_ste",
    "ste_backward",
]
