"""Dense float32 kernels with instrumented FLOP accounting.

Conventions used across the engine:

* a "tensor" is a C-contiguous numpy float32 array; shape carries the
  logical dimensions and the flat buffer is row-major,
* every reduction (matmul inner products, softmax denominators, RMS
  means) accumulates in float64 and rounds back to float32 at the end,
* kernels verify that their outputs are finite and raise NumericsError
  otherwise; NaN/Inf anywhere is a hard error, not a value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ConfigError, NumericsError, ShapeError

F32 = np.float32
F64 = np.float64


def as_tensor(values) -> np.ndarray:
    """Coerce values to a C-contiguous float32 array."""
    return np.ascontiguousarray(values, dtype=F32)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericsError(f"non-finite values in {what}")
    return x


@dataclass
class FlopCounter:
    """Monotonic multiply-accumulate counter."""

    multiply_accumulate_count: int = 0

    def add(self, n: int) -> None:
        if n < 0:
            raise ArgumentError(f"flop increment must be >= 0, got {n}")
        self.multiply_accumulate_count += n


def matmul(a: np.ndarray, b: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    """[m,k] @ [k,n] -> [m,n], accumulating in float64.

    The counter, when given, is incremented by m*k*n multiply-accumulates.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    m, k = a.shape
    kb, n = b.shape
    if k != kb:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    out = (a.astype(F64) @ b.astype(F64)).astype(F32)
    if counter is not None:
        counter.add(m * k * n)
    return check_finite(out, "matmul output")


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a [m,n] tensor, shifted by the row max."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got shape {x.shape}")
    check_finite(x, "softmax input")
    x64 = x.astype(F64)
    x64 -= x64.max(axis=1, keepdims=True)
    e = np.exp(x64)
    out = (e / e.sum(axis=1, keepdims=True)).astype(F32)
    return check_finite(out, "softmax output")


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    """Scale each trailing-dim vector by 1/sqrt(mean of squares + eps), then by gain."""
    d = x.shape[-1]
    if gain.shape != (d,):
        raise ShapeError(f"gain shape {gain.shape} does not match feature dim {d}")
    x64 = x.astype(F64)
    ms = np.mean(x64 * x64, axis=-1, keepdims=True)
    out = (x64 / np.sqrt(ms + eps) * gain.astype(F64)).astype(F32)
    return check_finite(out, "rms_norm output")


def rope_apply(x: np.ndarray, positions, theta_base: float) -> np.ndarray:
    """Rotate consecutive feature pairs of x [t, heads, d] by position-dependent angles.

    Pair i = (x[..., 2i], x[..., 2i+1]) is rotated by
    position * theta_base**(-2i/d). Pure function; negative positions give
    the inverse rotation.
    """
    if x.ndim != 3:
        raise ShapeError(f"rope_apply expects [tokens, heads, d], got {x.shape}")
    t, _, d = x.shape
    if d % 2 != 0:
        raise ConfigError(f"rotary head dim must be even, got {d}")
    pos = np.asarray(positions, dtype=F64)
    if pos.shape != (t,):
        raise ShapeError(f"positions length {pos.shape} does not match {t} tokens")
    inv_freq = theta_base ** (-np.arange(0, d, 2, dtype=F64) / d)  # [d/2]
    angles = pos[:, None] * inv_freq[None, :]                      # [t, d/2]
    cos = np.cos(angles)[:, None, :]
    sin = np.sin(angles)[:, None, :]
    x64 = x.astype(F64)
    even = x64[..., 0::2]
    odd = x64[..., 1::2]
    out = np.empty_like(x64)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return check_finite(out.astype(F32), "rope output")


def top_k_indices(scores, k: int) -> list[int]:
    """Indices of the k largest scores; ties break toward the smaller index.

    The result is sorted ascending, so it reads as a token subset rather
    than a ranking.
    """
    s = np.asarray(scores, dtype=F32)
    if s.ndim != 1:
        raise ShapeError(f"top_k_indices expects a 1-D score vector, got {s.shape}")
    if k < 0:
        raise ArgumentError(f"k must be >= 0, got {k}")
    if k > s.shape[0]:
        raise ArgumentError(f"k={k} exceeds the {s.shape[0]} available scores")
    check_finite(s, "top-k scores")
    # stable sort on negated scores keeps smaller original indices first on ties
    order = np.argsort(-s, kind="stable")[:k]
    return sorted(int(i) for i in order)


def ratio_budget(p: float, n: int) -> int:
    """Selection budget k = ceil(p * n) for a recompute ratio p in [0, 1]."""
    if not 0.0 <= p <= 1.0:
        raise ArgumentError(f"recompute ratio must lie in [0, 1], got {p}")
    return math.ceil(p * n)
