from .nn import feed_forward, linear, make_rng, multihead_attention, xavier_uniform
from .optim import AdamWState, ConfigError, adamw_step, cosine_lr
from .tensor import (
    DimensionError,
    Tensor,
    as_tensor,
    concat,
    cross_entropy,
    exp,
    gelu,
    l2_normalize,
    layer_norm,
    log,
    logsumexp,
    matmul,
    mean,
    relu,
    softmax,
    sqrt,
    tanh,
    transpose,
)

__all__ = [
    "AdamWState", "ConfigError", "DimensionError", "Tensor", "adamw_step", "as_tensor",
    "concat", "cosine_lr", "cross_entropy", "exp", "feed_forward", "gelu", "l2_normalize",
    "layer_norm", "linear", "log", "logsumexp", "make_rng", "matmul", "mean",
    "multihead_attention", "relu", "softmax", "sqrt", "tanh", "transpose", "xavier_uniform",
]
