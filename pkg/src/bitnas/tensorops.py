"""Dense NCHW tensors, bit-packed sign planes and the popcount arithmetic
that makes 1-bit convolution cheap.

Conventions used throughout the package:

* a "tensor" is a C-contiguous ``np.float32`` array in NCHW order;
* a packed bit encodes +1 as 1 and -1 as 0, with ``sign(0) = +1``;
* bits are packed along the innermost contiguous axis into little-endian
  64-bit words, one row of words per leading-axis element, so a single
  XOR+popcount covers 64 channel/tap positions at once;
* padding bits beyond the logical row length are always zero and never
  contribute to popcounts (both operands agree on the pad, so XOR is 0
  there).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, GeometryError

WORD_BITS = 64


def as_f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


def sign_pm1(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with the sign(0) = +1 convention, as float32 +-1."""
    return np.where(np.asarray(x) >= 0, np.float32(1.0), np.float32(-1.0))


@dataclass(frozen=True)
class BitTensor:
    """Sign bits of a 4-d tensor, packed per leading-axis row.

    ``words[r]`` holds the ``row_bits`` innermost elements of row ``r``
    (C*H*W order), one bit each, in little-endian uint64 words.  ``pad_mask``
    has a 1 wherever the bit position is logically valid; everything past
    ``row_bits`` is guaranteed to be stored as 0.
    """

    logical_shape: tuple[int, int, int, int]
    words: np.ndarray  # uint64, shape (rows, words_per_row)
    row_bits: int

    @property
    def rows(self) -> int:
        return self.logical_shape[0]

    @property
    def words_per_row(self) -> int:
        return self.words.shape[1]

    @property
    def pad_mask(self) -> np.ndarray:
        return _valid_bit_mask(self.row_bits, self.words_per_row)

    def popcount_rows(self) -> np.ndarray:
        """Number of +1 bits per row (pad bits excluded by construction)."""
        return np.bitwise_count(self.words).sum(axis=1).astype(np.int64)


def _valid_bit_mask(row_bits: int, words_per_row: int) -> np.ndarray:
    mask = np.zeros(words_per_row, dtype=np.uint64)
    full, rem = divmod(row_bits, WORD_BITS)
    mask[:full] = np.uint64(0xFFFFFFFFFFFFFFFF)
    if rem:
        mask[full] = np.uint64((1 << rem) - 1)
    return mask


def pack_bit_rows(bits: np.ndarray) -> np.ndarray:
    """Pack a (rows, n) 0/1 uint8 matrix into (rows, ceil(n/64)) uint64 words.

    Trailing pad bits come out as zero because np.packbits zero-fills.
    """
    rows, n = bits.shape
    packed = np.packbits(bits, axis=1, bitorder="little")
    pad_bytes = (-packed.shape[1]) % 8
    if pad_bytes:
        packed = np.concatenate(
            [packed, np.zeros((rows, pad_bytes), dtype=np.uint8)], axis=1
        )
    return packed.view(np.uint64)


def pack_signs(t: np.ndarray) -> BitTensor:
    """Pack the signs of a 4-d float tensor, bit i = 1 iff t[i] >= 0."""
    t = np.asarray(t)
    if t.ndim != 4:
        raise ContractError(f"pack_signs expects a 4-d tensor, got ndim={t.ndim}")
    if not np.isfinite(t).all():
        raise ContractError("pack_signs input must be finite")
    rows = t.shape[0]
    row_bits = int(np.prod(t.shape[1:]))
    bits = (t.reshape(rows, row_bits) >= 0).astype(np.uint8)
    return BitTensor(tuple(t.shape), pack_bit_rows(bits), row_bits)


def unpack_signs(bt: BitTensor) -> np.ndarray:
    """Inverse of pack_signs: +-1 float32 tensor of the logical shape."""
    as_bytes = bt.words.view(np.uint8)
    bits = np.unpackbits(as_bytes, axis=1, bitorder="little")[:, : bt.row_bits]
    return np.where(bits, np.float32(1.0), np.float32(-1.0)).reshape(bt.logical_shape)


def xnor_popcount_dot(a: np.ndarray, b: np.ndarray, n: int) -> int:
    """Dot product of two +-1 vectors given as packed bit rows.

    Equals ``n - 2 * popcount(a XOR b)``: every agreeing bit contributes +1,
    every differing bit -1.  Pad bits are zero in both rows, so they never
    land in the XOR.
    """
    a = np.asarray(a, dtype=np.uint64).ravel()
    b = np.asarray(b, dtype=np.uint64).ravel()
    words = (n + WORD_BITS - 1) // WORD_BITS
    if n < 0 or a.shape[0] != words or b.shape[0] != words:
        raise ContractError(
            f"bit rows of {a.shape[0]} and {b.shape[0]} words do not match "
            f"logical length {n} ({words} words expected)"
        )
    return int(n) - 2 * int(np.bitwise_count(np.bitwise_xor(a, b)).sum())

_POPCOUNT_CHUNK = 1 << 22  # uint64 temporaries per chunk (~32 MB)


def popcount_matmul(a_words: np.ndarray, b_words: np.ndarray, n: int) -> np.ndarray:
    """All-pairs +-1 dot products of packed rows: (P, W) x (F, W) -> (P, F).

    The batched form of xnor_popcount_dot; chunked over P to bound the size
    of the XOR temporary.
    """
    a_words = np.asarray(a_words, dtype=np.uint64)
    b_words = np.asarray(b_words, dtype=np.uint64)
    if a_words.shape[1] != b_words.shape[1]:
        raise ContractError("word counts differ between operands")
    p, w = a_words.shape
    f = b_words.shape[0]
    out = np.empty((p, f), dtype=np.int32)
    step = max(1, _POPCOUNT_CHUNK // max(1, f * w))
    for lo in range(0, p, step):
        hi = min(p, lo + step)
        xor = np.bitwise_xor(a_words[lo:hi, None, :], b_words[None, :, :])
        out[lo:hi] = n - 2 * np.bitwise_count(xor).sum(axis=2, dtype=np.int32)
    return out


def conv_out_hw(
    h: int, w: int, kernel: tuple[int, int], stride: int, dilation: int, padding: int
) -> tuple[int, int]:
    """Output spatial dims of a convolution; raises if degenerate."""
    if stride < 1 or dilation < 1 or padding < 0:
        raise GeometryError(
            f"stride={stride}, dilation={dilation}, padding={padding} invalid"
        )
    kh, kw = kernel
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if oh <= 0 or ow <= 0:
        raise GeometryError(
            f"conv of {h}x{w} with k={kernel}, s={stride}, d={dilation}, "
            f"p={padding} has empty output ({oh}x{ow})"
        )
    return oh, ow


def pad_nchw(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(
        x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
        constant_values=value,
    )


def _patch_windows(
    xp: np.ndarray, kernel: tuple[int, int], stride: int, dilation: int
) -> np.ndarray:
    """(N, C, OH, OW, kh, kw) strided view over an already padded input."""
    kh, kw = kernel
    eff_h = dilation * (kh - 1) + 1
    eff_w = dilation * (kw - 1) + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (eff_h, eff_w), axis=(2, 3))
    return win[:, :, ::stride, ::stride, ::dilation, ::dilation]


def weight_rows(w: np.ndarray) -> np.ndarray:
    """(F, C, kh, kw) weights flattened to rows matching the patch column
    order of lower_conv_patches."""
    f = w.shape[0]
    return np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(f, -1)


def rows_to_weight(rows: np.ndarray, w_shape) -> np.ndarray:
    f, c, kh, kw = w_shape
    return np.ascontiguousarray(rows.reshape(f, kh, kw, c).transpose(0, 3, 1, 2))


def lower_conv_patches(
    x: np.ndarray,
    kernel: tuple[int, int],
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
    pad_value: float = 0.0,
) -> tuple[np.ndarray, tuple[int, int]]:
    """Lower conv receptive fields to a (N*OH*OW, kh*kw*C) patch matrix.

    Rows enumerate output positions in (n, oh, ow) order; columns enumerate
    taps in (kh, kw, c) order so that one tap's channels sit contiguously
    (cache-friendly fills, and packed words cover many channels at once).
    Both the float and the binary convolution share this lowering, so a
    convolution is a single row-by-filter-row dot; use weight_rows() to
    flatten weights to the matching order.  Out-of-bounds taps read
    ``pad_value`` (0 for the float path; callers on the binary path pad the
    float activation before sign-packing).
    """
    x = np.asarray(x)
    n, c, h, w = x.shape
    oh, ow = conv_out_hw(h, w, kernel, stride, dilation, padding)
    kh, kw = kernel
    xp = pad_nchw(x, padding, pad_value)
    xt = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            cols[:, :, :, i, j, :] = xt[
                :, hi : hi + oh * stride : stride, wj : wj + ow * stride : stride, :
            ]
    return cols.reshape(n * oh * ow, kh * kw * c), (oh, ow)


def scatter_conv_patches(
    grad_patches: np.ndarray,
    x_shape: tuple[int, int, int, int],
    kernel: tuple[int, int],
    stride: int,
    dilation: int,
    padding: int,
) -> np.ndarray:
    """Adjoint of lower_conv_patches: fold patch-row gradients back to NCHW.

    Overlapping taps accumulate.  Contributions that fell on padding are
    cropped away.
    """
    n, c, h, w = x_shape
    kh, kw = kernel
    oh, ow = conv_out_hw(h, w, kernel, stride, dilation, padding)
    gp = grad_patches.reshape(n, oh, ow, kh, kw, c)
    xg = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=grad_patches.dtype)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            xg[:, hi : hi + oh * stride : stride, wj : wj + ow * stride : stride, :] += gp[
                :, :, :, i, j, :
            ]
    if padding:
        xg = xg[:, padding : padding + h, padding : padding + w, :]
    return np.ascontiguousarray(xg.transpose(0, 3, 1, 2))
