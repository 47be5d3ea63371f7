"""Minimal deterministic dense-matrix kernels and seeded randomness.

Everything here operates on 2-D float64 numpy arrays ("matrices") and is a
pure function of its inputs. The only stateful object is :class:`Rng`, which
wraps numpy's PCG64 counter-based generator so that a given seed produces the
same draw sequence on every platform.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

# Sentinel used for masked-out gate logits. Handled explicitly in row_softmax.
NEG_INF = float("-inf")

_SOFTPLUS_CUTOFF = 30.0
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when matrix dimensions are incompatible."""


class Rng:
    """Seeded random source (PCG64). Same seed, same sequence, any platform."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, index: int) -> "Rng":
        """Derive an independent sub-stream; used for top-level seed splitting."""
        child = Rng.__new__(Rng)
        child.seed = self.seed
        seq = np.random.SeedSequence(self.seed).spawn(index + 1)[index]
        child._gen = np.random.Generator(np.random.PCG64(seq))
        return child

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected 2-D matrix, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.shape} x {b.shape}")
    return a @ b


def row_softmax(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by row-max subtraction.

    Entries equal to NEG_INF are masked out and map to exactly 0. A row that
    is entirely NEG_INF has no selectable entry and raises ValueError.
    """
    a = as_matrix(a)
    finite = a != NEG_INF
    if not finite.any(axis=1).all():
        raise ValueError("row_softmax: row with no finite entry")
    shifted = np.where(finite, a - np.max(np.where(finite, a, NEG_INF), axis=1, keepdims=True), NEG_INF)
    e = np.where(finite, np.exp(np.where(finite, shifted, 0.0)), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def softplus(a: np.ndarray) -> np.ndarray:
    """ln(1 + e^x), with the linear branch for x > 30 to avoid overflow."""
    a = np.asarray(a, dtype=np.float64)
    return np.where(a > _SOFTPLUS_CUTOFF, a, np.log1p(np.exp(np.minimum(a, _SOFTPLUS_CUTOFF))))


def sigmoid(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def gelu(a: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU."""
    a = np.asarray(a, dtype=np.float64)
    return 0.5 * a * (1.0 + erf(a * _INV_SQRT2))


def gelu_grad(a: np.ndarray) -> np.ndarray:
    """d/dx of the exact GELU."""
    a = np.asarray(a, dtype=np.float64)
    return 0.5 * (1.0 + erf(a * _INV_SQRT2)) + a * _INV_SQRT2PI * np.exp(-0.5 * a * a)


def normal_draws(rng: Rng, n: int) -> np.ndarray:
    if n < 0:
        raise ValueError("n must be >= 0")
    return rng.normal(n)


def assert_finite(a: np.ndarray, context: str = "") -> np.ndarray:
    if not np.isfinite(a).all():
        raise FloatingPointError(f"non-finite values {('in ' + context) if context else ''}")
    return a
