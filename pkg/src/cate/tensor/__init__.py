"""Minimal float64 tensor library with reverse-mode autodiff."""

from .core import (
    DimensionError,
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    concat,
    div,
    exp,
    gelu,
    getitem,
    is_grad_enabled,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    sqrt,
    stack,
    sub,
    swapaxes,
    tanh,
    tensor,
    tmax,
    transpose,
    tsum,
    where,
)
from .functional import (
    conv2d,
    cosine_similarity,
    dropout,
    embedding,
    l2_normalize,
    layer_norm,
    log_softmax,
    multi_head_attention,
    scaled_dot_product_attention,
    softmax,
    softmax_cross_entropy,
)
from .gradcheck import NonDeterministicError, grad_check
from .optim import Adam

__all__ = [name for name in dir() if not name.startswith("_")]
