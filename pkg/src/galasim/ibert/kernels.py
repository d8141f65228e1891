"""Exact integer matrix kernels with the padding-free streaming designs.

Three matrix-multiply styles, mirroring how the hardware modules consume
their operands:

* linear — row-streamed input against a resident weight matrix; arbitrary
  row counts need no padding because extra rows are just extra rows.
* attention dot-product — Q rows broadcast to the PEs, K^T columns scattered
  across them; K is zero-padded on its row dimension to the minimum multiple
  of NUM_PE and the padded output columns are removed before emission.
* softmax matrix multiply — each PE owns a different row of the left matrix
  and walks the shared right matrix, so both the row count and the output
  width are arbitrary; the left matrix's inner dimension gets the minimum
  padding, removed again at the output.

All products are exact over integers. Accumulation runs through float64 BLAS,
which is exact here: every partial sum is an integer bounded by
3072 * 127 * 127 < 2**53, so no addition ever rounds. The bound is enforced.
"""

from __future__ import annotations

import math

import numpy as np

from .quant import AccTensor, ArithmeticFault, QuantTensor

# largest inner dimension for which INT8xINT8 accumulation provably fits both
# float64 exactness and the INT32 accumulator (with bias headroom)
MAX_INNER_DIM = 3072


class ConfigFault(Exception):
    """A kernel was configured with unusable geometry."""


def min_padding(m: int, num_pe: int) -> int:
    """NUM_PE * ceil(M / NUM_PE): the minimum extension so each PE owns a vector."""
    if num_pe < 1:
        raise ConfigFault(f"num_pe must be >= 1, got {num_pe}")
    return num_pe * math.ceil(m / num_pe)


def _exact_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """INT8 x INT8 -> int64 product, exact by the MAX_INNER_DIM bound."""
    inner = a.shape[1]
    if inner > MAX_INNER_DIM:
        raise ArithmeticFault(
            f"inner dimension {inner} exceeds the exactness bound {MAX_INNER_DIM}")
    out = a.astype(np.float64) @ b.astype(np.float64)
    return out.astype(np.int64)


def check_linear_config(h_in: int, bias: np.ndarray) -> None:
    """Reject configurations that could overflow the INT32 accumulator."""
    if h_in > MAX_INNER_DIM:
        raise ConfigFault(f"inner dimension {h_in} exceeds {MAX_INNER_DIM}")
    if bias.size:
        headroom = 2**31 - h_in * 128 * 128
        if int(np.abs(bias).max()) >= headroom:
            raise ConfigFault("bias magnitude leaves no INT32 headroom for the accumulator")


def linear(x: QuantTensor, w: QuantTensor, bias: np.ndarray) -> AccTensor:
    """Row-streamed matmul plus bias: out[m][j] = sum_h x[m][h]*w[h][j] + bias[j].

    bias is INT32 at scale x.scale * w.scale, so it adds directly onto the
    accumulator. No padding on the row dimension.
    """
    if x.cols != w.rows:
        raise ConfigFault(f"inner dims differ: x is {x.data.shape}, w is {w.data.shape}")
    bias = np.asarray(bias, dtype=np.int64)
    if bias.shape != (w.cols,):
        raise ConfigFault(f"bias shape {bias.shape} does not match output width {w.cols}")
    check_linear_config(x.cols, bias)
    acc = _exact_matmul(x.data, w.data) + bias
    return AccTensor(acc, x.scale * w.scale)


def attention_dot_product(q: QuantTensor, k: QuantTensor, num_pe: int) -> AccTensor:
    """Q . K^T for one attention head, exact, with minimum padding on K's rows.

    The zero padding only produces output columns that are sliced off before
    emission, so results for any M equal the unpadded product.
    """
    if q.cols != k.cols:
        raise ConfigFault(f"head dims differ: Q is {q.data.shape}, K is {k.data.shape}")
    m_k = k.rows
    padded = min_padding(m_k, num_pe)
    k_pad = np.zeros((padded, k.cols), dtype=np.int8)
    k_pad[:m_k] = k.data
    acc = _exact_matmul(q.data, k_pad.T)
    return AccTensor(acc[:, :m_k], q.scale * k.scale)


def softmax_matmul(p: QuantTensor, v: QuantTensor, num_pe: int) -> AccTensor:
    """P . V with minimum padding on P's inner dimension, exact.

    P rows and V columns can be any size; the zero rows added to V cancel the
    zero columns added to P, so padding never reaches the output.
    """
    if p.cols != v.rows:
        raise ConfigFault(f"inner dims differ: P is {p.data.shape}, V is {v.data.shape}")
    inner = p.cols
    padded = min_padding(inner, num_pe)
    p_pad = np.zeros((p.rows, padded), dtype=np.int8)
    p_pad[:, :inner] = p.data
    v_pad = np.zeros((padded, v.cols), dtype=np.int8)
    v_pad[:inner] = v.data
    acc = _exact_matmul(p_pad, v_pad)
    return AccTensor(acc, p.scale * v.scale)
