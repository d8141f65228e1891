"""Monolithic integer encoder: the in-process reference the simulator must match.

One encoder is the usual stack — Q/K/V projections, per-head attention,
output projection, residual + layernorm, FFN with GELU, residual + layernorm —
with every step integer-only and every intermediate requantized at a scale
carried in the parameter set. The distributed 38-kernel plan streams the same
functions row by row and must reproduce these bytes exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import ConfigFault, attention_dot_product, linear, softmax_matmul
from .nonlinear import gelu_int, layernorm_int, residual_add, softmax_int
from .quant import AccTensor, QuantTensor, requantize


@dataclass(frozen=True)
class EncoderConfig:
    """Model geometry. Defaults are the BERT-base dimensions."""

    max_seq_len: int = 128
    hidden: int = 768
    heads: int = 12
    ffn: int = 3072
    encoders: int = 12
    attention_num_pe: int = 12

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigFault(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.max_seq_len < 1 or self.attention_num_pe < 1:
            raise ConfigFault("max_seq_len and attention_num_pe must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @classmethod
    def tiny(cls) -> "EncoderConfig":
        """Desk-scale geometry for fast tests."""
        return cls(max_seq_len=8, hidden=8, heads=2, ffn=32, encoders=3,
                   attention_num_pe=8)


@dataclass
class LinearParams:
    weight: QuantTensor            # H_in x H_out, INT8
    bias: np.ndarray               # INT32 at in_scale * weight.scale
    out_scale: float | None        # requantization target; None = raw accumulator


@dataclass
class LayerNormParams:
    gamma: np.ndarray              # INT8
    gamma_scale: float
    beta: np.ndarray               # INT32 at LN_MID_SCALE * gamma_scale
    out_scale: float
    res_scale: float               # common scale for the folded residual add


@dataclass
class EncoderParams:
    """All integer parameters and activation scales for one encoder."""

    config: EncoderConfig
    input_scale: float
    q_proj: LinearParams
    k_proj: LinearParams
    v_proj: LinearParams
    attn_out: LinearParams
    ffn1: LinearParams             # out_scale None: GELU consumes the accumulator
    ffn2: LinearParams
    ln_attn: LayerNormParams
    ln_out: LayerNormParams
    ctx_scale: float = 0.0         # per-head context quantization scale
    gelu_scale: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def output_scale(self) -> float:
        return self.ln_out.out_scale


def project(x: QuantTensor, p: LinearParams) -> QuantTensor:
    """Linear + Quant in one step."""
    acc = linear(x, p.weight, p.bias)
    return requantize(acc, p.out_scale)


def attention_head(q: QuantTensor, k: QuantTensor, v: QuantTensor,
                   num_pe: int) -> AccTensor:
    """Dot-product scores, integer softmax, probability-weighted values."""
    scores = attention_dot_product(q, k, num_pe)
    # the 1/sqrt(head_dim) factor folds into the score scale; codes unchanged
    scores = AccTensor(scores.data, scores.scale / np.sqrt(q.cols))
    probs = softmax_int(scores)
    return softmax_matmul(probs, v, num_pe)


def head_slice(t: QuantTensor, head: int, head_dim: int) -> QuantTensor:
    return QuantTensor(t.data[:, head * head_dim:(head + 1) * head_dim], t.scale)


def encoder_forward(x: QuantTensor, params: EncoderParams,
                    head_order: list[int] | None = None) -> QuantTensor:
    """Run one encoder on an M x H INT8 input; M may be anything up to max_seq_len."""
    cfg = params.config
    m, h = x.data.shape
    if h != cfg.hidden:
        raise ConfigFault(f"input width {h} != hidden {cfg.hidden}")
    if not 1 <= m <= cfg.max_seq_len:
        raise ConfigFault(f"sequence length {m} outside 1..{cfg.max_seq_len}")
    order = head_order if head_order is not None else list(range(cfg.heads))

    q = project(x, params.q_proj)
    k = project(x, params.k_proj)
    v = project(x, params.v_proj)

    ctx = np.empty((m, cfg.hidden), dtype=np.int8)
    for head in order:
        acc = attention_head(head_slice(q, head, cfg.head_dim),
                             head_slice(k, head, cfg.head_dim),
                             head_slice(v, head, cfg.head_dim),
                             cfg.attention_num_pe)
        ctx[:, head * cfg.head_dim:(head + 1) * cfg.head_dim] = \
            requantize(acc, params.ctx_scale).data
    gathered = QuantTensor(ctx, params.ctx_scale)

    attn = project(gathered, params.attn_out)
    r1 = residual_add(attn, x, params.ln_attn.res_scale)
    h1 = layernorm_int(r1, params.ln_attn.gamma, params.ln_attn.gamma_scale,
                       params.ln_attn.beta, params.ln_attn.out_scale)

    f1 = linear(h1, params.ffn1.weight, params.ffn1.bias)
    g = gelu_int(f1, params.gelu_scale)
    f2 = project(g, params.ffn2)
    r2 = residual_add(f2, h1, params.ln_out.res_scale)
    return layernorm_int(r2, params.ln_out.gamma, params.ln_out.gamma_scale,
                         params.ln_out.beta, params.ln_out.out_scale)


def stack_forward(x: QuantTensor, stack: list[EncoderParams]) -> QuantTensor:
    """Encoders in series; each one's output scale feeds the next."""
    for params in stack:
        x = encoder_forward(x, params)
    return x
