"""Reference single-precision math for the fused residual-add + RMSNorm.

Everything here is a pure function over immutable inputs. Values are stored
as float32; the per-token sum of squares is accumulated in float64 in
ascending hidden-index order so results are bit-reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError

DEFAULT_EPSILON = 1e-5


@dataclass(frozen=True)
class TokenMatrix:
    """Dense ``num_tokens x hidden`` activation matrix (row-major float32)."""

    num_tokens: int
    hidden: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.num_tokens < 0:
            raise DimensionError(f"num_tokens must be >= 0, got {self.num_tokens}")
        if self.hidden < 1:
            raise DimensionError(f"hidden must be >= 1, got {self.hidden}")
        vals = np.array(self.values, dtype=np.float32, copy=True).reshape(-1)
        if vals.size != self.num_tokens * self.hidden:
            raise DimensionError(
                f"values has {vals.size} elements, expected "
                f"{self.num_tokens} x {self.hidden} = {self.num_tokens * self.hidden}"
            )
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_array(cls, array) -> "TokenMatrix":
        arr = np.asarray(array, dtype=np.float32)
        if arr.ndim != 2:
            raise DimensionError(f"expected a 2-D array, got shape {arr.shape}")
        return cls(arr.shape[0], arr.shape[1], arr)

    @classmethod
    def zeros(cls, num_tokens: int, hidden: int) -> "TokenMatrix":
        return cls(num_tokens, hidden, np.zeros(num_tokens * hidden, dtype=np.float32))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_tokens, self.hidden)

    def as_array(self) -> np.ndarray:
        """Read-only ``(T, H)`` view of the values."""
        return self.values.reshape(self.num_tokens, self.hidden)

    def rows(self, start: int, end: int) -> "TokenMatrix":
        return TokenMatrix.from_array(self.as_array()[start:end])


@dataclass(frozen=True)
class NormParams:
    weight: np.ndarray = field(repr=False)
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float32).reshape(-1)
        w.setflags(write=False)
        object.__setattr__(self, "weight", w)
        # zero is allowed for exact hand checks; a zero-norm token then raises
        if not self.epsilon >= 0:
            raise NumericError(f"epsilon must be >= 0, got {self.epsilon}")

    @classmethod
    def ones(cls, hidden: int, epsilon: float = DEFAULT_EPSILON) -> "NormParams":
        return cls(np.ones(hidden, dtype=np.float32), epsilon)

    @property
    def hidden(self) -> int:
        return self.weight.size


def check_finite(array: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{what} contains NaN or Inf")


def sum_of_squares(rows: np.ndarray) -> np.ndarray:
    """Per-row sum of squares, float64, ascending column order.

    ``cumsum`` is a strict left-to-right scan, unlike ``np.sum`` which uses
    pairwise blocks; the last column is the ordered total.
    """
    if rows.shape[1] == 0:
        return np.zeros(rows.shape[0], dtype=np.float64)
    sq = np.square(rows, dtype=np.float64)
    return np.cumsum(sq, axis=1)[:, -1]


def normalize_rows(summed: np.ndarray, weight: np.ndarray, epsilon: float) -> np.ndarray:
    """Scale float32 rows by rsqrt(mean square + eps) and the weight."""
    hidden = summed.shape[1]
    variance = sum_of_squares(summed) / hidden
    if epsilon == 0 and np.any(variance == 0):
        raise NumericError("zero-norm token with epsilon=0")
    scale = (1.0 / np.sqrt(variance + epsilon)).astype(np.float32)
    return (summed * scale[:, None]) * weight[None, :]


def rmsnorm_residual(
    input: TokenMatrix, residual: TokenMatrix, params: NormParams
) -> tuple[TokenMatrix, TokenMatrix]:
    """Fused residual add followed by RMSNorm.

    Returns ``(output, residual_out)`` where ``residual_out = input + residual``
    and ``output`` is that sum normalized per token.
    """
    if input.shape != residual.shape:
        raise DimensionError(f"input {input.shape} and residual {residual.shape} differ")
    if params.hidden != input.hidden:
        raise DimensionError(f"weight length {params.hidden} != hidden {input.hidden}")
    x = input.as_array()
    r = residual.as_array()
    check_finite(x, "input")
    check_finite(r, "residual")
    check_finite(params.weight, "weight")

    summed = x + r
    out = normalize_rows(summed, params.weight, params.epsilon)
    return TokenMatrix.from_array(out), TokenMatrix.from_array(summed)
