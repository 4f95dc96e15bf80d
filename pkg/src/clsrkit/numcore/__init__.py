"""Minimal dense-tensor numerics with reverse-mode differentiation."""

from .tensor import (
    NonFiniteError,
    Parameter,
    Tape,
    Tensor,
    backward,
    default_dtype,
    grad_enabled,
    no_grad,
    precision,
)
from .ops import (
    abs,
    activation,
    add,
    as_tensor,
    concat,
    conv1d,
    cross_entropy_ls,
    div,
    embedding,
    exp,
    gelu,
    getitem,
    layer_norm,
    linear,
    log,
    log_softmax_tau,
    logaddexp,
    masked_fill,
    matmul,
    mean,
    mul,
    neg,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    softmax_tau,
    sub,
    sum,
    transpose,
    where,
)
from .gradcheck import GradCheckReport, grad_check
from .serialize import load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes
