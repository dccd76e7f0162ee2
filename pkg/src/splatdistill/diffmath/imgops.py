"""Differentiable image primitives for the loss stack.

Images are [H, W, C] float32; kernels apply per channel. Correlation
(not flipped convolution) throughout, matching the usual filter-bank
convention. The inner loops are compiled: these filters run on every
training image every iteration.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from ..exceptions import DimensionError
from .tensor import DTYPE, Tensor, record_op


@njit(cache=True, parallel=True, fastmath=True)
def _corr_rows(x, k, out):
    h, w, c = x.shape
    ksz = k.size
    wo = w - ksz + 1
    for i in prange(h):
        for j in range(wo):
            for ch in range(c):
                acc = np.float32(0.0)
                for t in range(ksz):
                    acc += k[t] * x[i, j + t, ch]
                out[i, j, ch] = acc


@njit(cache=True, parallel=True, fastmath=True)
def _corr_cols(x, k, out):
    h, w, c = x.shape
    ksz = k.size
    ho = h - ksz + 1
    for i in prange(ho):
        for j in range(w):
            for ch in range(c):
                acc = np.float32(0.0)
                for t in range(ksz):
                    acc += k[t] * x[i + t, j, ch]
                out[i, j, ch] = acc


@njit(cache=True, parallel=True, fastmath=True)
def _corr3x3(xp, k, out):
    h, w, c = out.shape
    for i in prange(h):
        for j in range(w):
            for ch in range(c):
                acc = np.float32(0.0)
                for a in range(3):
                    for b in range(3):
                        acc += k[a, b] * xp[i + a, j + b, ch]
                out[i, j, ch] = acc


def _sep_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    tmp = np.empty((h, w - k.size + 1, c), dtype=DTYPE)
    _corr_rows(x, k, tmp)
    out = np.empty((h - k.size + 1, w - k.size + 1, c), dtype=DTYPE)
    _corr_cols(tmp, k, out)
    return out


def _sep_valid_adjoint(g: np.ndarray, k: np.ndarray, h: int, w: int) -> np.ndarray:
    # adjoint of valid correlation = full correlation with the reversed taps
    kr = k[::-1].copy()
    p = k.size - 1
    gp = np.pad(g, ((p, p), (p, p), (0, 0))).astype(DTYPE)
    return _sep_valid(gp, kr)


def conv_separable_valid(img: Tensor, k1d) -> Tensor:
    """Separable 2D correlation with a 1D kernel, valid region only.

    Output is [H-K+1, W-K+1, C]; border pixels whose window would leave
    the image are dropped, so padding policy never enters the result.
    """
    k = np.ascontiguousarray(k1d, dtype=DTYPE)
    x = np.ascontiguousarray(img.data)
    if x.ndim != 3:
        raise DimensionError(f"conv_separable_valid: expected [H,W,C], got {x.shape}")
    if x.shape[0] < k.size or x.shape[1] < k.size:
        raise DimensionError(
            f"conv_separable_valid: image {x.shape[:2]} smaller than window {k.size}"
        )
    out = Tensor(_sep_valid(x, k))

    def backward(g):
        return (_sep_valid_adjoint(np.ascontiguousarray(g), k, x.shape[0], x.shape[1]),)

    record_op([img], [out], backward)
    return out


def _reflect_pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="reflect")


def _reflect_fold1(gp: np.ndarray) -> np.ndarray:
    """Adjoint of 1-pixel reflect padding (mirror without edge repeat)."""
    h, w = gp.shape[0] - 2, gp.shape[1] - 2
    g = gp[1 : h + 1, 1 : w + 1].copy()
    g[1, :] += gp[0, 1 : w + 1]
    g[h - 2, :] += gp[h + 1, 1 : w + 1]
    g[:, 1] += gp[1 : h + 1, 0]
    g[:, w - 2] += gp[1 : h + 1, w + 1]
    g[1, 1] += gp[0, 0]
    g[1, w - 2] += gp[0, w + 1]
    g[h - 2, 1] += gp[h + 1, 0]
    g[h - 2, w - 2] += gp[h + 1, w + 1]
    return g


def conv3x3_reflect(img: Tensor, kernel) -> Tensor:
    """3x3 correlation with 1-pixel reflect padding (same-size output)."""
    k = np.ascontiguousarray(kernel, dtype=DTYPE)
    if k.shape != (3, 3):
        raise DimensionError(f"conv3x3_reflect: kernel {k.shape}")
    x = img.data
    if x.ndim != 3 or x.shape[0] < 3 or x.shape[1] < 3:
        raise DimensionError(f"conv3x3_reflect: image shape {x.shape}")
    xp = np.ascontiguousarray(_reflect_pad1(x))
    out_arr = np.empty(x.shape, dtype=DTYPE)
    _corr3x3(xp, k, out_arr)
    out = Tensor(out_arr)

    def backward(g):
        gp = np.ascontiguousarray(np.pad(g, ((2, 2), (2, 2), (0, 0)), mode="constant"))
        kr = np.ascontiguousarray(k[::-1, ::-1])
        gpad = np.empty((x.shape[0] + 2, x.shape[1] + 2, x.shape[2]), dtype=DTYPE)
        _corr3x3(gp, kr, gpad)
        return (_reflect_fold1(gpad),)

    record_op([img], [out], backward)
    return out


def avg_pool2(img: Tensor) -> Tensor:
    """2x2 average pooling; H and W must be even."""
    x = img.data
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2: odd image size {x.shape}")
    out = Tensor(x.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3)))

    def backward(g):
        gx = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * DTYPE(0.25)
        return (gx,)

    record_op([img], [out], backward)
    return out


def gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian taps (e.g. the 11-tap SSIM window)."""
    r = (size - 1) / 2.0
    xs = np.arange(size, dtype=np.float64) - r
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return (k / k.sum()).astype(DTYPE)
