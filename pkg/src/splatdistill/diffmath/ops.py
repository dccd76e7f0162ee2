"""Primitive differentiable operations.

Every op computes its forward result eagerly in float32 and, when a tape
is active, registers an analytic backward. Tensor-tensor ops require
identical shapes (no broadcasting); Python scalars are accepted where
noted.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

from ..exceptions import DegenerateInputError, DimensionError
from .tensor import DTYPE, Tensor, record_op

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@njit(inline="always")
def _tanh_f32(x):
    # rational minimax approximation on [-7.9053, 7.9053], ~1 ulp in f32;
    # clamping (branchless, keeps the loop SIMD-friendly) saturates outside.
    hi = np.float32(7.90531110763549805)
    x = min(hi, max(-hi, x))
    x2 = x * x
    p = np.float32(-2.76076847742355e-16)
    p = np.float32(2.00018790482477e-13) + p * x2
    p = np.float32(-8.60467152213735e-11) + p * x2
    p = np.float32(5.12229709037114e-08) + p * x2
    p = np.float32(1.48572235717979e-05) + p * x2
    p = np.float32(6.37261928875436e-04) + p * x2
    p = np.float32(4.89352455891786e-03) + p * x2
    p = x * p
    q = np.float32(1.19825839466702e-06)
    q = np.float32(1.18534705686654e-04) + q * x2
    q = np.float32(2.26843463243900e-03) + q * x2
    q = np.float32(4.89352518554385e-03) + q * x2
    return p / q


@njit(cache=True, parallel=True, fastmath=True)
def _gelu_fwd_kernel(x, out, th):
    c = np.float32(_GELU_C)
    a = np.float32(_GELU_A)
    half = np.float32(0.5)
    one = np.float32(1.0)
    for i in prange(x.size):
        v = x[i]
        t = _tanh_f32(c * (v + a * v * v * v))
        th[i] = t
        out[i] = half * v * (one + t)


@njit(cache=True, parallel=True, fastmath=True)
def _gelu_bwd_kernel(g, x, th, gx):
    c = np.float32(_GELU_C)
    a3 = np.float32(3.0 * _GELU_A)
    half = np.float32(0.5)
    one = np.float32(1.0)
    for i in prange(x.size):
        v = x[i]
        t = th[i]
        du = c * (one + a3 * v * v)
        gx[i] = g[i] * half * ((one + t) + v * (one - t * t) * du)


@njit(cache=True, parallel=True, fastmath=True)
def _tanh_array_kernel(x, out):
    for i in prange(x.size):
        out[i] = _tanh_f32(x[i])


def fast_tanh(x: np.ndarray) -> np.ndarray:
    """Vectorized rational tanh (exposed for accuracy tests)."""
    x = np.ascontiguousarray(x, dtype=DTYPE)
    out = np.empty_like(x.reshape(-1))
    _tanh_array_kernel(x.reshape(-1), out)
    return out.reshape(x.shape)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        out = Tensor(a.data + DTYPE(b))
        record_op([a], [out], lambda g: (g,))
        return out
    b = _wrap(b)
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    record_op([a, b], [out], lambda g: (g, g))
    return out


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -b)
    b = _wrap(b)
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    record_op([a, b], [out], lambda g: (g, -g))
    return out


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        s = DTYPE(b)
        out = Tensor(a.data * s)
        record_op([a], [out], lambda g: (g * s,))
        return out
    b = _wrap(b)
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    record_op([a, b], [out], lambda g: (g * b.data, g * a.data))
    return out


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / b)
    b = _wrap(b)
    _check_same_shape(a, b, "div")
    inv = 1.0 / b.data
    out = Tensor(a.data * inv)
    record_op([a, b], [out], lambda g: (g * inv, -g * out.data * inv))
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    record_op([a], [out], lambda g: (-g,))
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    record_op([a], [out], lambda g: (g * out.data,))
    return out


def absolute(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data))
    sign = np.sign(a.data)
    record_op([a], [out], lambda g: (g * sign,))
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data)
    record_op([a], [out], lambda g: (g * (2.0 * a.data),))
    return out


# ---------------------------------------------------------------------------
# activations


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation; fused kernels on the MLP hot path."""
    x = np.ascontiguousarray(a.data)
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    th = np.empty_like(flat)
    _gelu_fwd_kernel(flat, out, th)
    out_t = Tensor(out.reshape(x.shape))

    def backward(g):
        gx = np.empty_like(flat)
        _gelu_bwd_kernel(np.ascontiguousarray(g).reshape(-1), flat, th, gx)
        return (gx.reshape(x.shape),)

    record_op([a], [out_t], backward)
    return out_t


def softplus(a: Tensor) -> Tensor:
    """ln(1 + e^x), stable for large |x|."""
    out = Tensor(np.logaddexp(DTYPE(0.0), a.data))
    sig = _sigmoid_raw(a.data)
    record_op([a], [out], lambda g: (g * sig,))
    return out


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    z = np.clip(x, -30.0, 30.0)
    return (1.0 / (1.0 + np.exp(-z))).astype(DTYPE)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_raw(a.data)
    out = Tensor(y)
    record_op([a], [out], lambda g: (g * (y * (1.0 - y)),))
    return out


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize along the last axis; rejects near-zero rows."""
    x = a.data
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    if float(norm.min()) <= eps:
        raise DegenerateInputError(
            f"l2_normalize: row norm {float(norm.min()):.3e} <= {eps:.0e}"
        )
    y = (x / norm).astype(DTYPE)
    out = Tensor(y)

    def backward(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return ((g - y * dot) / norm,)

    record_op([a], [out], backward)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x:[B,I], w:[I,O], b:[O]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise DimensionError(
            f"affine: expected ranks (2,2,1), got "
            f"({x.data.ndim},{w.data.ndim},{b.data.ndim})"
        )
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"affine: x{x.data.shape} @ w{w.data.shape} + b{b.data.shape}"
        )
    out = Tensor(x.data @ w.data + b.data)

    def backward(g):
        return (g @ w.data.T, x.data.T @ g, g.sum(axis=0))

    record_op([x, w, b], [out], backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)
    record_op([a, b], [out], lambda g: (g @ b.data.T, a.data.T @ g))
    return out


# ---------------------------------------------------------------------------
# shape


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    orig = a.data.shape
    record_op([a], [out], lambda g: (g.reshape(orig),))
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    record_op(tensors, [out], backward)
    return out


def select_row(a: Tensor, i: int) -> Tensor:
    """a[i] along axis 0 (used to split batched outputs into scenes)."""
    if not (0 <= i < a.data.shape[0]):
        raise DimensionError(f"select_row: index {i} for axis size {a.data.shape[0]}")
    out = Tensor(a.data[i].copy())

    def backward(g):
        full = np.zeros(a.data.shape, dtype=DTYPE)
        full[i] = g
        return (full,)

    record_op([a], [out], backward)
    return out


def slice_last(a: Tensor, lo: int, hi: int) -> Tensor:
    """a[..., lo:hi] along the last axis."""
    if not (0 <= lo < hi <= a.data.shape[-1]):
        raise DimensionError(f"slice_last: [{lo}:{hi}] on last dim {a.data.shape[-1]}")
    out = Tensor(a.data[..., lo:hi].copy())

    def backward(g):
        full = np.zeros(a.data.shape, dtype=DTYPE)
        full[..., lo:hi] = g
        return (full,)

    record_op([a], [out], backward)
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    shape = a.data.shape
    record_op([a], [out], lambda g: (np.full(shape, g, dtype=DTYPE),))
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean())
    shape = a.data.shape
    record_op([a], [out], lambda g: (np.full(shape, g / n, dtype=DTYPE),))
    return out


def weighted_sum(terms) -> Tensor:
    """Sum of (weight, scalar tensor) pairs; weights are Python floats."""
    total = None
    for w, t in terms:
        wt = mul(t, float(w))
        total = wt if total is None else add(total, wt)
    if total is None:
        return Tensor(0.0)
    return total
