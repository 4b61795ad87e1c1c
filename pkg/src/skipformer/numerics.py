"""Dense float32 kernels shared by the runtime, the oracle and pruning.

Matrices and vectors are plain ``numpy.float32`` arrays (2-D and 1-D).  Every
reduction accumulates left to right in index order, so results are
bit-reproducible and do not depend on BLAS blocking or SIMD reduction trees.
Kernels that take a vector also accept a 2-D array and then act row-wise; the
row results are bitwise identical to calling the kernel on each row alone.
"""

from __future__ import annotations

import enum
import math

import numpy as np

DTYPE = np.float32

# above this many products the k-loop beats materializing the (m, k, n) tensor
_MATMUL_TENSOR_LIMIT = 1 << 18


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


class NumericError(ArithmeticError):
    """A kernel produced NaN or Inf."""


class ActivationKind(str, enum.Enum):
    RELU = "relu"
    GELU = "gelu"


def as_f32(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def _check_finite(y: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(y)):
        raise NumericError(f"{what} produced non-finite values")
    return y


def ordered_sum(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sum along ``axis`` strictly left to right (``np.sum`` is pairwise)."""
    x = as_f32(x)
    if x.shape[axis] == 0:
        return np.zeros(np.delete(x.shape, axis if axis >= 0 else x.ndim + axis), dtype=DTYPE)
    return np.take(np.add.accumulate(x, axis=axis, dtype=DTYPE), -1, axis=axis)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with each output accumulated over k in index order.

    A 1-D ``a`` is treated as a single row and a 1-D result is returned.
    """
    a = as_f32(a)
    b = as_f32(b)
    squeeze = a.ndim == 1
    if squeeze:
        a = a[None, :]
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    m, k_dim = a.shape
    n = b.shape[1]
    # separate multiply and add: no fused multiply-add, one rounding each
    if 0 < m * k_dim * n <= _MATMUL_TENSOR_LIMIT:
        # accumulate is sequential along k, so this equals the loop below bitwise
        acc = np.add.accumulate(a[:, :, None] * b[None, :, :], axis=1, dtype=DTYPE)[:, -1, :]
    else:
        acc = np.zeros((m, n), dtype=DTYPE)
        for k in range(k_dim):
            acc = acc + a[:, k : k + 1] * b[k : k + 1, :]
    _check_finite(acc, "matmul")
    return acc[0] if squeeze else acc


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray:
    """Normalize over the last axis with population variance."""
    x = as_f32(x)
    gamma = as_f32(gamma)
    beta = as_f32(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: x has {n} features, gamma {gamma.shape}, beta {beta.shape}")
    if eps < 0:
        raise ValueError("layer_norm eps must be non-negative")
    mean = ordered_sum(x) / DTYPE(n)
    # one correction pass removes the rounding residue of the float32 mean
    mean = mean + ordered_sum(x - np.expand_dims(mean, -1)) / DTYPE(n)
    centered = x - np.expand_dims(mean, -1)
    var = ordered_sum(centered * centered) / DTYPE(n)
    denom = np.sqrt(var + DTYPE(eps))
    with np.errstate(divide="ignore", invalid="ignore"):
        y = gamma * (centered / np.expand_dims(denom, -1)) + beta
    return _check_finite(y.astype(DTYPE, copy=False), "layer_norm")


def softmax(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Stable softmax over the last axis.

    ``mask`` (boolean, same shape) excludes entries: they get weight exactly 0
    and do not take part in the max.  Every row must keep at least one entry.
    """
    x = as_f32(x)
    if x.shape[-1] == 0:
        raise ShapeError("softmax of an empty vector")
    _check_finite(x, "softmax input")
    if mask is None:
        m = np.max(x, axis=-1, keepdims=True)
        e = np.exp(x - m)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"softmax mask shape {mask.shape} != {x.shape}")
        if not np.all(mask.any(axis=-1)):
            raise ShapeError("softmax row with every entry masked")
        m = np.max(np.where(mask, x, -np.inf), axis=-1, keepdims=True).astype(DTYPE)
        e = np.where(mask, np.exp(np.where(mask, x - m, 0)), 0).astype(DTYPE)
    y = e / np.expand_dims(ordered_sum(e), -1)
    return _check_finite(y.astype(DTYPE, copy=False), "softmax")


_GELU_C = DTYPE(math.sqrt(2.0 / math.pi))


def activation(x: np.ndarray, kind: ActivationKind | str) -> np.ndarray:
    x = as_f32(x)
    kind = ActivationKind(kind)
    if kind is ActivationKind.RELU:
        y = np.maximum(x, DTYPE(0))
    else:
        inner = _GELU_C * (x + DTYPE(0.044715) * (x * x * x))
        y = DTYPE(0.5) * x * (DTYPE(1) + np.tanh(inner))
    return _check_finite(y.astype(DTYPE, copy=False), "activation")
