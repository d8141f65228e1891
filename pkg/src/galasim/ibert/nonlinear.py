"""Integer-only nonlinearities: softmax, GELU, layernorm, residual addition.

Exponential and erf use second-order polynomial approximations evaluated in
integer arithmetic; layernorm normalizes with an exact integer square root.
Each function is bit-exact against its scalar twin in
:mod:`galasim.ibert.oracle` (enforced by the verification suite), and all of
them operate row-wise, so streaming a matrix through one row at a time yields
the same bytes as a whole-matrix call.
"""

from __future__ import annotations

import math

import numpy as np

from .quant import (AccTensor, ArithmeticFault, QuantTensor, rescale_int,
                    rshift_round_half_even)

# exp(x) ~ a*x^2 + b*x + c on (-ln2, 0]
EXP_A = 0.35815147
EXP_B = 0.96963238
EXP_C = 1.0
EXP_LN2 = 0.6931
EXP_Z_MAX = 30

SOFT_EXP_SCALE = 2.0 ** -15
SOFT_MAX_BIT = 31
SOFT_OUT_BITS = 7
SOFTMAX_OUT_SCALE = 2.0 ** -SOFT_OUT_BITS

# erf(x) ~ a*(x+b)^2 + c on [b, 0], extended as an odd function
GELU_A = -0.2888
GELU_B = -1.769
GELU_C = 1.0
GELU_SQRT2 = 1.4142
GELU_SHIFT_BITS = 14

LN_FACTOR_BITS = 31
LN_MID_SCALE = 2.0 ** -11
LN_MID_BITS = 16

RES_BITS = 16


def _i_exp(q: np.ndarray, scale: float) -> tuple[np.ndarray, float]:
    """exp on non-positive integer codes: ln2 range reduction + quadratic."""
    x0 = math.floor(-EXP_LN2 / scale)
    qb = math.floor((EXP_B / EXP_A) / scale)
    qc = math.floor((EXP_C / EXP_A) / (scale * scale))
    q = np.maximum(q, EXP_Z_MAX * x0)
    z = q // x0
    r = q - x0 * z
    q_poly = (r + qb) * r + qc
    return q_poly >> z, EXP_A * scale * scale


def softmax_int(s: AccTensor) -> QuantTensor:
    """Row-wise integer softmax of INT32 scores; output scale 2**-7."""
    x = s.data.astype(np.int64)
    x = x - x.max(axis=1, keepdims=True)
    q_exp, s_exp = _i_exp(x, s.scale)
    q16 = np.clip(rescale_int(q_exp, s_exp / SOFT_EXP_SCALE), 0, 2**15 - 1)
    sums = q16.sum(axis=1, keepdims=True)
    factor = (1 << SOFT_MAX_BIT) // sums
    probs = rshift_round_half_even(q16 * factor, SOFT_MAX_BIT - SOFT_OUT_BITS)
    out = np.minimum(probs, 127)
    return QuantTensor(out.astype(np.int8), SOFTMAX_OUT_SCALE)


def gelu_int(x: AccTensor, out_scale: float) -> QuantTensor:
    """Integer GELU via the polynomial erf, requantized to INT8."""
    s_in = x.scale / GELU_SQRT2
    b_int = math.floor(GELU_B / s_in)
    c_int = math.floor((GELU_C / GELU_A) / (s_in * s_in))
    s_erf = GELU_A * s_in * s_in * (1 << GELU_SHIFT_BITS)
    shift = math.floor(1.0 / s_erf)
    s_acc = x.scale * s_erf / 2.0
    v = x.data.astype(np.int64)
    sgn = np.sign(v)
    ab = np.minimum(np.abs(v), -b_int)
    y = (sgn * ((ab + b_int) ** 2 + c_int)) >> GELU_SHIFT_BITS
    g = v * (y + shift)
    # s_acc is negative (GELU_A < 0); flip both so the quantizer sees scale > 0
    out = np.clip(rescale_int(-g, (-s_acc) / out_scale), -128, 127)
    return QuantTensor(out.astype(np.int8), out_scale)


def layernorm_int(x: AccTensor, gamma: np.ndarray, gamma_scale: float,
                  beta: np.ndarray, out_scale: float) -> QuantTensor:
    """Row-wise integer layernorm with integer affine parameters.

    gamma is INT8 at gamma_scale; beta is INT32 at LN_MID_SCALE * gamma_scale.
    The input scale cancels in the normalization, so only the shape matters.
    A zero-variance row normalizes to zeros (no division fault).
    """
    v = x.data.astype(np.int64)
    n = v.shape[1]
    sums = v.sum(axis=1, keepdims=True)
    mean = div_round_half_even(sums, n)
    y = v - mean
    var = (y * y).sum(axis=1)
    std = np.array([max(math.isqrt(int(t)), 1) for t in var], dtype=np.int64)
    factor = ((1 << LN_FACTOR_BITS) // std)[:, None]
    norm = (y * factor) >> 1
    s_norm = math.sqrt(n) / 2 ** (LN_FACTOR_BITS - 1)
    lo, hi = -(1 << (LN_MID_BITS - 1)), (1 << (LN_MID_BITS - 1)) - 1
    mid = np.clip(rescale_int(norm, s_norm / LN_MID_SCALE), lo, hi)
    acc = mid * gamma.astype(np.int64) + beta.astype(np.int64)
    out = np.clip(rescale_int(acc, (LN_MID_SCALE * gamma_scale) / out_scale), -128, 127)
    return QuantTensor(out.astype(np.int8), out_scale)


def div_round_half_even(a: np.ndarray, n: int) -> np.ndarray:
    """round(a / n) with ties to even, exact, for integer arrays."""
    q = a // n
    r = a - q * n
    bump = (2 * r > n) | ((2 * r == n) & ((q & 1) == 1))
    return q + bump


def residual_add(a: QuantTensor, b: QuantTensor, common_scale: float) -> AccTensor:
    """Rescale both INT8 operands to a common scale and add, clamped to 16 bits."""
    if a.data.shape != b.data.shape:
        raise ArithmeticFault(
            f"residual shapes differ: {a.data.shape} vs {b.data.shape}")
    qa = rescale_int(a.data.astype(np.int64), a.scale / common_scale)
    qb = rescale_int(b.data.astype(np.int64), b.scale / common_scale)
    lo, hi = -(1 << (RES_BITS - 1)), (1 << (RES_BITS - 1)) - 1
    return AccTensor(np.clip(qa + qb, lo, hi), common_scale)
