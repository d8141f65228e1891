"""Quantized tensor containers and the integer-only requantization primitive.

Matrix kernels take INT8 operands and produce INT32 accumulators; the Quant
step rescales INT32 back to INT8 entirely in integer arithmetic: the real
scale ratio is decomposed into a 31-bit fixed-point multiplier and a shift,
the product is rounded half-to-even and clamped. Every function here has a
pure-Python scalar twin in :mod:`galasim.ibert.oracle` and must match it
bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MULT_BITS = 31           # fixed-point multiplier precision
MAX_POST_SHIFT = 37      # larger shifts are split off as a floor pre-shift


class ArithmeticFault(Exception):
    """An integer intermediate left its declared range (a defect, not wraparound)."""


@dataclass
class QuantTensor:
    """Row-major INT8 matrix with a positive dequantization scale."""

    data: np.ndarray
    scale: float

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype != np.int8:
            if not np.issubdtype(self.data.dtype, np.integer):
                raise ArithmeticFault(f"QuantTensor needs integer data, got {self.data.dtype}")
            if self.data.size and (self.data.min() < -128 or self.data.max() > 127):
                raise ArithmeticFault("QuantTensor values out of INT8 range")
            self.data = self.data.astype(np.int8)
        if self.data.ndim != 2:
            raise ArithmeticFault(f"QuantTensor must be 2-D, got shape {self.data.shape}")
        if not self.scale > 0:
            raise ArithmeticFault(f"scale must be positive, got {self.scale}")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def dequantize(self) -> np.ndarray:
        return self.data.astype(np.float64) * self.scale

    def row(self, r: int) -> "QuantTensor":
        return QuantTensor(self.data[r:r + 1], self.scale)


@dataclass
class AccTensor:
    """Row-major INT32 accumulator matrix; overflow is a defect, never wraparound."""

    data: np.ndarray
    scale: float

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if not np.issubdtype(self.data.dtype, np.integer):
            raise ArithmeticFault(f"AccTensor needs integer data, got {self.data.dtype}")
        if self.data.size and (self.data.min() < -(2**31) or self.data.max() > 2**31 - 1):
            raise ArithmeticFault("AccTensor values out of INT32 range")
        self.data = self.data.astype(np.int64)
        if self.data.ndim != 2:
            raise ArithmeticFault(f"AccTensor must be 2-D, got shape {self.data.shape}")
        if not self.scale > 0:
            raise ArithmeticFault(f"scale must be positive, got {self.scale}")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def dequantize(self) -> np.ndarray:
        return self.data.astype(np.float64) * self.scale

    def row(self, r: int) -> "AccTensor":
        return AccTensor(self.data[r:r + 1], self.scale)


def fixed_point_multiplier(ratio: float) -> tuple[int, int]:
    """Decompose a positive real ratio into (m, e) with ratio ~= m / 2**e.

    m is the 31-bit mantissa rounded half-up, e = 31 - exponent from frexp.
    """
    if not ratio > 0 or not math.isfinite(ratio):
        raise ArithmeticFault(f"scale ratio must be positive finite, got {ratio}")
    frac, exp = math.frexp(ratio)                 # frac in [0.5, 1)
    m = math.floor(frac * (1 << MULT_BITS) + 0.5)  # half-up; frac >= 0
    return m, MULT_BITS - exp


def rshift_round_half_even(v: np.ndarray | int, e: int):
    """round(v / 2**e) with ties to even, exact on integers (e may be <= 0)."""
    if e <= 0:
        return v << (-e)
    q = v >> e
    r = v - (q << e)
    half = 1 << (e - 1)
    if isinstance(v, (int, np.integer)):
        if r > half or (r == half and (q & 1)):
            q += 1
        return q
    bump = (r > half) | ((r == half) & ((q & 1) == 1))
    return q + bump


def rescale_int(values: np.ndarray, ratio: float) -> np.ndarray:
    """Multiply integers by a real ratio using fixed-point integer arithmetic.

    Shifts beyond MAX_POST_SHIFT are applied as a floor pre-shift on the value
    so the int64 product v*m never overflows; the pre-shift is part of the
    scheme and mirrored by the scalar oracle.
    """
    m, e = fixed_point_multiplier(ratio)
    v = values.astype(np.int64)
    if e > MAX_POST_SHIFT:
        v = v >> (e - MAX_POST_SHIFT)
        e = MAX_POST_SHIFT
    if v.size and int(np.abs(v).max()) * m >= 2**63:
        # exact wide-register path: same function, Python big ints
        flat = [rshift_round_half_even(int(t) * m, e) for t in v.ravel()]
        return np.array(flat, dtype=np.int64).reshape(v.shape)
    return rshift_round_half_even(v * m, e)


def requantize(x: AccTensor, out_scale: float) -> QuantTensor:
    """INT32 -> INT8 requantization: fixed-point multiply, shift, round, clamp."""
    if not out_scale > 0:
        raise ArithmeticFault(f"out_scale must be positive, got {out_scale}")
    q = rescale_int(x.data, x.scale / out_scale)
    return QuantTensor(np.clip(q, -128, 127).astype(np.int8), out_scale)


def rescale_clamp(x: AccTensor, out_scale: float, bits: int) -> AccTensor:
    """Like :func:`requantize` but clamping to a ``bits``-wide integer tensor."""
    q = rescale_int(x.data, x.scale / out_scale)
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return AccTensor(np.clip(q, lo, hi), out_scale)
