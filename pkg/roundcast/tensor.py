"""
Numeric substrate for the sequence classifiers.

Tensors are plain `numpy.ndarray` objects of dtype float64 in C (row-major)
order; boolean masks are `ndarray[bool]`. The kernels here are the few that
carry a contract beyond what numpy gives directly (shape errors that name
both operands, saturation-safe sigmoid, masked softmax with all-masked rows).

Randomness goes through `SeededRng`, a thin owner of a numpy `Generator`
backed by the PCG64 bit generator. Streams are keyed by `(seed, *keys)` via
`numpy.random.SeedSequence`, so the same key tuple always yields the same
draws regardless of what other streams were consumed before it.
"""

from __future__ import annotations

from typing import Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from .errors import DimensionError, NumericError, ParameterError

Tensor = npt.NDArray[np.float64]
Mask = npt.NDArray[np.bool_]
Shape = Union[int, Tuple[int, ...]]

# Largest double below 1.0 and smallest positive normal double.
_SIGMOID_HI = 1.0 - 2.0**-53
_SIGMOID_LO = np.finfo(np.float64).tiny


def as_tensor(values: npt.ArrayLike) -> Tensor:
    return np.ascontiguousarray(values, dtype=np.float64)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of rank-2 operands, batched over the leading dim for rank 3."""
    if a.ndim not in (2, 3) or b.ndim != a.ndim:
        raise DimensionError(
            "matmul expects two rank-2 or two rank-3 tensors, "
            f"got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def sigmoid(x: npt.ArrayLike) -> Tensor:
    """Elementwise logistic function, clamped into the open interval (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.clip(out, _SIGMOID_LO, _SIGMOID_HI)


def masked_softmax(scores: Tensor, mask: Mask) -> Tensor:
    """
    Softmax over the last axis restricted to positions where `mask` is true.

    Masked positions get exactly zero weight. A row with no valid position
    comes back as all zeros instead of NaN.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    filled = np.where(mask, scores, -np.inf)
    row_max = np.max(filled, axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    weights = np.exp(np.where(mask, scores - row_max, -np.inf))
    denom = np.sum(weights, axis=-1, keepdims=True)
    return np.divide(weights, denom, out=np.zeros_like(weights), where=denom > 0)


class SeededRng:
    """
    Single-owner random stream: PCG64 seeded from SeedSequence([seed, *keys]).

    `derive(*keys)` builds an independent child stream from the root seed and
    an extended key path; it never consumes draws from the parent.
    """

    def __init__(self, seed: int, *keys: int) -> None:
        if seed < 0 or seed >= 2**64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
        if any(k < 0 for k in keys):
            raise ParameterError(f"stream keys must be non-negative, got {keys}")
        self.seed = int(seed)
        self.keys: Tuple[int, ...] = tuple(int(k) for k in keys)
        sequence = np.random.SeedSequence([self.seed, *self.keys])
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, keys={self.keys})"

    def derive(self, *keys: int) -> "SeededRng":
        return SeededRng(self.seed, *self.keys, *keys)

    def uniform(self, shape: Shape, lo: float = 0.0, hi: float = 1.0) -> Tensor:
        if not lo < hi:
            raise ParameterError(f"uniform bounds need lo < hi, got lo={lo}, hi={hi}")
        values = self._generator.uniform(lo, hi, size=shape)
        return values.astype(np.float64, copy=False)

    def random(self, shape: Shape) -> Tensor:
        return self._generator.random(size=shape)

    def integers(self, low: int, high: int, size: Shape) -> npt.NDArray[np.int64]:
        return self._generator.integers(low, high, size=size, dtype=np.int64)

    def permutation(self, n: int) -> npt.NDArray[np.int64]:
        return self._generator.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> npt.NDArray[np.int64]:
        return self._generator.choice(n, size=size, replace=replace)

    def bernoulli(self, shape: Shape, p: float) -> Mask:
        return self._generator.random(size=shape) < p


def rng_uniform(rng: SeededRng, shape: Shape, lo: float, hi: float) -> Tensor:
    """i.i.d. uniform draws on [lo, hi); advances `rng`."""
    return rng.uniform(shape, lo, hi)


def require_finite(name: str, values: Tensor) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"{name} contains non-finite values")


def check_shape(name: str, values: Tensor, expected: Sequence[int]) -> None:
    if tuple(values.shape) != tuple(expected):
        raise DimensionError(
            f"{name} has shape {tuple(values.shape)}, expected {tuple(expected)}"
        )
