"""Minimal tensor core: reverse-mode differentiation, layers, AdamW."""

from .gradcheck import GradCheckReport, grad_check, relative_error
from .layers import (
    LayerNormLayer,
    LinearLayer,
    kaiming_init,
    layer_norm,
    linear_forward,
    make_rng,
    resolve_dtype,
)
from .optim import AdamWState, adamw_step
from .tensor import (
    GradientError,
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    cross_entropy,
    dropout,
    finite_checks,
    gelu,
    linear,
    matmul,
    max_,
    mean,
    mul,
    pad_axis,
    relu,
    reshape,
    softmax,
    sub,
    sum_,
    swap_last,
    transpose,
    zero_grads,
)

__all__ = [name for name in dir() if not name.startswith("_")]
