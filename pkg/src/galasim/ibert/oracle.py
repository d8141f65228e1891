"""Scalar reference implementations of every integer kernel.

These are the ground truth the vectorized kernels are verified against:
pure-Python big-integer arithmetic, one element at a time, no numpy. The
polynomial coefficients and fixed-point parameters are deliberately restated
here as literals rather than imported, so the two code paths share nothing
but the scheme definition itself.

All functions take and return plain lists of Python ints.
"""

from __future__ import annotations

import math
from operator import mul

# fixed-point requantization
_MULT_BITS = 31
_MAX_POST_SHIFT = 37

# integer exponential: a*x^2 + b*x + c ~ exp(x) on (-ln2, 0]
_EXP_A = 0.35815147
_EXP_B = 0.96963238
_EXP_C = 1.0
_EXP_LN2 = 0.6931
_EXP_Z_MAX = 30

# softmax output
_SOFT_EXP_SCALE = 2.0 ** -15
_SOFT_MAX_BIT = 31
_SOFT_OUT_BITS = 7
SOFTMAX_OUT_SCALE = 2.0 ** -_SOFT_OUT_BITS

# integer erf for GELU: a*(x+b)^2 + c ~ erf(x) on [b, 0], odd-extended
_GELU_A = -0.2888
_GELU_B = -1.769
_GELU_C = 1.0
_GELU_SQRT2 = 1.4142
_GELU_SHIFT_BITS = 14

# layernorm
_LN_FACTOR_BITS = 31
_LN_MID_SCALE = 2.0 ** -11
_LN_MID_BITS = 16
LN_MID_SCALE = _LN_MID_SCALE

_RES_BITS = 16


def _clamp(v: int, lo: int, hi: int) -> int:
    return lo if v < lo else hi if v > hi else v


def _rshift_half_even(v: int, e: int) -> int:
    if e <= 0:
        return v << (-e)
    q = v >> e
    r = v - (q << e)
    half = 1 << (e - 1)
    if r > half or (r == half and (q & 1)):
        q += 1
    return q


def oracle_multiplier(ratio: float) -> tuple[int, int]:
    frac, exp = math.frexp(ratio)
    return math.floor(frac * (1 << _MULT_BITS) + 0.5), _MULT_BITS - exp


def oracle_rescale(v: int, ratio: float) -> int:
    m, e = oracle_multiplier(ratio)
    if e > _MAX_POST_SHIFT:
        v >>= e - _MAX_POST_SHIFT
        e = _MAX_POST_SHIFT
    return _rshift_half_even(v * m, e)


def oracle_requantize(mat: list[list[int]], in_scale: float, out_scale: float) -> list[list[int]]:
    ratio = in_scale / out_scale
    return [[_clamp(oracle_rescale(v, ratio), -128, 127) for v in row] for row in mat]


def oracle_matmul(a: list[list[int]], b: list[list[int]]) -> list[list[int]]:
    """Naive triple-loop integer matrix product."""
    bt = [list(col) for col in zip(*b)]
    return [[sum(map(mul, row, col)) for col in bt] for row in a]


def oracle_linear(x, w, bias) -> list[list[int]]:
    acc = oracle_matmul(x, w)
    return [[v + bb for v, bb in zip(row, bias)] for row in acc]


def oracle_dot_product(q, k) -> list[list[int]]:
    """Q . K^T by brute force (K given row-major, untransposed)."""
    return [[sum(map(mul, qrow, krow)) for krow in k] for qrow in q]


def min_padding(m: int, num_pe: int) -> int:
    """Smallest extension of m letting each of num_pe PEs own whole vectors."""
    return num_pe * math.ceil(m / num_pe)


def oracle_i_exp(q: int, scale: float) -> tuple[int, float]:
    """Integer exp(q*scale) for q <= 0: range reduction by ln2 + 2nd-order poly."""
    x0 = math.floor(-_EXP_LN2 / scale)            # negative
    q = max(q, _EXP_Z_MAX * x0)
    z = q // x0
    r = q - x0 * z                                 # in (x0, 0]
    qb = math.floor((_EXP_B / _EXP_A) / scale)
    qc = math.floor((_EXP_C / _EXP_A) / (scale * scale))
    q_poly = (r + qb) * r + qc
    out_scale = _EXP_A * scale * scale
    return q_poly >> z, out_scale


def oracle_softmax(mat: list[list[int]], scale: float) -> list[list[int]]:
    """Row-wise integer softmax; output scale is SOFTMAX_OUT_SCALE."""
    out = []
    for row in mat:
        mx = max(row)
        q16 = []
        for v in row:
            q_exp, s_exp = oracle_i_exp(v - mx, scale)
            q16.append(_clamp(oracle_rescale(q_exp, s_exp / _SOFT_EXP_SCALE), 0, 2**15 - 1))
        factor = (1 << _SOFT_MAX_BIT) // sum(q16)
        shift = _SOFT_MAX_BIT - _SOFT_OUT_BITS
        out.append([min(_rshift_half_even(v * factor, shift), 127) for v in q16])
    return out


def oracle_gelu(mat: list[list[int]], scale: float, out_scale: float) -> list[list[int]]:
    """Integer GELU: odd-extended polynomial erf, then requantization to INT8."""
    s_erf_in = scale / _GELU_SQRT2
    b_int = math.floor(_GELU_B / s_erf_in)                            # negative
    c_int = math.floor((_GELU_C / _GELU_A) / (s_erf_in * s_erf_in))   # negative
    s_erf = _GELU_A * s_erf_in * s_erf_in * (1 << _GELU_SHIFT_BITS)   # negative
    shift = math.floor(1.0 / s_erf)                                   # negative
    s_out_acc = scale * s_erf / 2.0                                   # negative
    ratio = (-s_out_acc) / out_scale
    out = []
    for row in mat:
        orow = []
        for v in row:
            sgn = (v > 0) - (v < 0)
            ab = min(abs(v), -b_int)
            y = sgn * ((ab + b_int) ** 2 + c_int)
            y >>= _GELU_SHIFT_BITS
            g = v * (y + shift)
            orow.append(_clamp(oracle_rescale(-g, ratio), -128, 127))
        out.append(orow)
    return out


def _div_round_half_even(a: int, n: int) -> int:
    q, r = divmod(a, n)
    if 2 * r > n or (2 * r == n and (q & 1)):
        q += 1
    return q


def oracle_layernorm(mat, gamma: list[int], gamma_scale: float,
                     beta: list[int], out_scale: float) -> list[list[int]]:
    """Row-wise integer layernorm: exact isqrt normalization + integer affine.

    The input scale cancels in (x - mean)/std, so it is not a parameter.
    beta is quantized at scale LN_MID_SCALE * gamma_scale.
    """
    n = len(mat[0])
    s_norm = math.sqrt(n) / 2 ** (_LN_FACTOR_BITS - 1)
    mid_ratio = s_norm / _LN_MID_SCALE
    out_ratio = (_LN_MID_SCALE * gamma_scale) / out_scale
    lo, hi = -(1 << (_LN_MID_BITS - 1)), (1 << (_LN_MID_BITS - 1)) - 1
    out = []
    for row in mat:
        mean = _div_round_half_even(sum(row), n)
        y = [v - mean for v in row]
        var = sum(t * t for t in y)
        std = max(math.isqrt(var), 1)
        factor = (1 << _LN_FACTOR_BITS) // std
        orow = []
        for t, g, b in zip(y, gamma, beta):
            norm = (t * factor) >> 1
            mid = _clamp(oracle_rescale(norm, mid_ratio), lo, hi)
            orow.append(_clamp(oracle_rescale(mid * g + b, out_ratio), -128, 127))
        out.append(orow)
    return out


def oracle_residual_add(a, a_scale: float, b, b_scale: float,
                        common_scale: float) -> list[list[int]]:
    """Integer residual addition: both operands rescaled to a common scale."""
    ra = a_scale / common_scale
    rb = b_scale / common_scale
    lo, hi = -(1 << (_RES_BITS - 1)), (1 << (_RES_BITS - 1)) - 1
    return [[_clamp(oracle_rescale(x, ra) + oracle_rescale(y, rb), lo, hi)
             for x, y in zip(arow, brow)] for arow, brow in zip(a, b)]
