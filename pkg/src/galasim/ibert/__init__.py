"""Integer-only encoder kernels and the monolithic reference executor."""

from .encoder import (EncoderConfig, EncoderParams, LayerNormParams,
                      LinearParams, encoder_forward, stack_forward)
from .kernels import (ConfigFault, attention_dot_product, linear, min_padding,
                      softmax_matmul)
from .nonlinear import (SOFTMAX_OUT_SCALE, gelu_int, layernorm_int,
                        residual_add, softmax_int)
from .quant import AccTensor, ArithmeticFault, QuantTensor, requantize

__all__ = [
    "AccTensor", "ArithmeticFault", "ConfigFault", "EncoderConfig",
    "EncoderParams", "LayerNormParams", "LinearParams", "QuantTensor",
    "SOFTMAX_OUT_SCALE", "attention_dot_product", "encoder_forward",
    "gelu_int", "layernorm_int", "linear", "min_padding", "requantize",
    "residual_add", "softmax_int", "softmax_matmul", "stack_forward",
]
