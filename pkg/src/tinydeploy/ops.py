"""Numeric kernels with a pinned accumulation order.

Every consumer of these kernels (naive interpreter, fused interpreter,
emitted C) must observe identical arithmetic per output element:

  - convolution: acc starts at 0 and gathers taps with input channel
    outermost, then kernel row, then kernel column; bias is added last;
  - linear: features accumulate in ascending index order, bias last;
  - max reductions update via strict greater-than comparisons;
  - int8 requantization multiplies the int32 accumulator by a float32
    multiplier and rounds half away from zero via the trunc(x +/- 0.5f)
    formula the emitted code uses.

float32 elementwise numpy ops and their scalar C equivalents are both IEEE
single precision (fused-multiply-add contraction disabled on the C side),
so the shared order makes FP32 results bitwise reproducible.
"""

from __future__ import annotations

import numpy as np


def conv_accumulate(x: np.ndarray, weight: np.ndarray, stride: int, padding: int,
                    out_h: int, out_w: int, acc_dtype: np.dtype) -> np.ndarray:
    """Cross-correlation accumulator over all output positions.

    x: (in_c, h, w); weight: (out_c, in_c, k, k).  Returns (out_c, out_h,
    out_w) in acc_dtype without bias or activation.  Zero padding is applied
    explicitly; adding a zero tap never changes an IEEE accumulator that is
    not -0.0, and the accumulator can never become -0.0 mid-sum, so this
    matches bounds-checked code that skips out-of-range taps.
    """
    in_c, h, w = x.shape
    out_c, _, k, _ = weight.shape
    xa = x.astype(acc_dtype, copy=False)
    wa = weight.astype(acc_dtype, copy=False)
    if padding:
        padded = np.zeros((in_c, h + 2 * padding, w + 2 * padding), dtype=acc_dtype)
        padded[:, padding:padding + h, padding:padding + w] = xa
    else:
        padded = xa
    acc = np.zeros((out_c, out_h, out_w), dtype=acc_dtype)
    for z in range(in_c):
        plane = padded[z]
        for i in range(k):
            for j in range(k):
                patch = plane[i:i + out_h * stride:stride, j:j + out_w * stride:stride]
                acc += patch[np.newaxis, :, :] * wa[:, z, i, j][:, np.newaxis, np.newaxis]
    return acc


def linear_accumulate(x: np.ndarray, weight: np.ndarray, acc_dtype: np.dtype) -> np.ndarray:
    """x: (in_features,); weight: (out_features, in_features)."""
    xa = x.astype(acc_dtype, copy=False)
    wa = weight.astype(acc_dtype, copy=False)
    acc = np.zeros(weight.shape[0], dtype=acc_dtype)
    for i in range(xa.shape[0]):
        acc += xa[i] * wa[:, i]
    return acc


def relu(x: np.ndarray) -> np.ndarray:
    """max(0, x) via strict comparison; -0.0 maps to +0.0 like `x > 0 ? x : 0`."""
    return np.where(x > 0, x, np.zeros_like(x))


def max_reduce(candidates: list[np.ndarray], valid: list[np.ndarray] | None = None,
               floor: np.ndarray | None = None) -> np.ndarray:
    """Running maximum in candidate order using strict > updates.

    With floor given, the running value starts there (fused-with-activation
    case).  Otherwise the first valid candidate initializes each position
    (naive pooling / fused-without-activation case).  valid masks exclude
    padding positions and must leave every output covered at least once.
    """
    if floor is not None:
        running = np.broadcast_to(floor, candidates[0].shape).copy()
        seeded = np.ones(candidates[0].shape, dtype=bool)
    else:
        running = np.zeros_like(candidates[0])
        seeded = np.zeros(candidates[0].shape, dtype=bool)
    for idx, cand in enumerate(candidates):
        ok = valid[idx] if valid is not None else np.ones(cand.shape, dtype=bool)
        take = ok & (~seeded | (cand > running))
        running = np.where(take, cand, running)
        seeded |= ok
    if not seeded.all():
        raise ValueError("pooling window with no valid elements")
    return running


def maxpool(x: np.ndarray, kernel: int, stride: int, padding: int,
            out_h: int, out_w: int) -> np.ndarray:
    """Per-channel window maximum; padding positions are excluded, never read."""
    in_c, h, w = x.shape
    candidates = []
    valid = []
    rows = np.arange(out_h) * stride - padding
    cols = np.arange(out_w) * stride - padding
    for wi in range(kernel):
        r = rows + wi
        r_ok = (r >= 0) & (r < h)
        rc = np.clip(r, 0, h - 1)
        for wj in range(kernel):
            c = cols + wj
            c_ok = (c >= 0) & (c < w)
            cc = np.clip(c, 0, w - 1)
            candidates.append(x[:, rc[:, np.newaxis], cc[np.newaxis, :]])
            ok = r_ok[:, np.newaxis] & c_ok[np.newaxis, :]
            valid.append(np.broadcast_to(ok[np.newaxis, :, :], (in_c, out_h, out_w)))
    return max_reduce(candidates, valid)


HALF = np.float32(0.5)
QMIN, QMAX = -127, 127


def requant_multiplier(s_in: float, s_weight: float, s_out: float) -> np.float32:
    """Per-unit requantization multiplier, fixed to float32 once at plan time."""
    return np.float32(float(s_in) * float(s_weight) / float(s_out))


def requantize(acc: np.ndarray, multiplier: np.float32) -> np.ndarray:
    """int32 accumulator -> int8 at the output scale.

    Mirrors the emitted C helper exactly: float32 product, half-away-from-zero
    rounding via trunc(x +/- 0.5f), then clamp to [-127, 127].
    """
    x = acc.astype(np.float32) * multiplier
    r = np.where(x >= 0, x + HALF, x - HALF)
    q = np.trunc(r).astype(np.int32)
    return np.clip(q, QMIN, QMAX)


def quantize_clamp(q: np.ndarray) -> np.ndarray:
    return np.clip(q, QMIN, QMAX)
