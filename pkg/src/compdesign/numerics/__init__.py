"""Minimal dense tensors, reverse-mode autodiff, Adam and checkpoints."""
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import Conv1d, GroupNorm, Linear, Module
from .optim import EMA, Adam, AdamState, adam_step
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    checked_mode,
    concat,
    conv1d,
    conv1d_out_len,
    default_dtype,
    gather,
    get_default_dtype,
    getitem,
    group_norm,
    matmul,
    mean,
    mse,
    mul,
    no_grad,
    relu,
    reshape,
    scatter_add,
    set_default_dtype,
    sigmoid,
    silu,
    sqrt,
    square,
    sub,
    tanh,
    transpose,
    tsum,
    upsample_nearest,
)
