"""Minimal dense-tensor arithmetic with reverse-mode autodiff."""
from .functional import atan2, gelu, layer_norm, linear, norm_lastdim, relu, softmax_lastdim
from .gradcheck import fd_check
from .rng import Rng
from .serialize import load_gten, save_gten, tensor_from_bytes, tensor_to_bytes
from .tensor import (
    Tensor,
    add,
    as_tensor,
    astype,
    backward,
    broadcast_to,
    clip,
    concat,
    div,
    exp,
    getitem,
    is_grad_enabled,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    reshape,
    sqrt,
    stack,
    sub,
    tabs,
    tanh,
    transpose,
    tsum,
    where,
)

__all__ = [name for name in dir() if not name.startswith("_")]
