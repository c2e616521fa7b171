"""Minimal tensor algebra with reverse-mode differentiation."""

from .nn import (
    SGD,
    Adam,
    LSTMCell,
    Linear,
    Module,
    clip_grad_norm,
    cross_entropy,
    lstm_cell,
    lstm_cell_reference,
    mse,
    read_checkpoint,
    save_checkpoint,
)
from .tensor import (
    DimensionError,
    Tape,
    Tensor,
    add,
    backward,
    blend,
    concat,
    div,
    exp,
    gather,
    getitem,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
    slice_,
    softmax,
    sqrt,
    stack,
    sub,
    sum,
    tanh,
)

__all__ = [
    "SGD", "Adam", "LSTMCell", "Linear", "Module", "clip_grad_norm", "cross_entropy",
    "lstm_cell", "lstm_cell_reference", "mse", "read_checkpoint", "save_checkpoint",
    "DimensionError", "Tape", "Tensor", "add", "backward", "blend", "concat", "div",
    "exp", "gather", "getitem", "log", "log_softmax", "matmul", "mean", "mul", "neg",
    "relu", "reshape", "sigmoid", "slice_", "softmax", "sqrt", "stack", "sub", "sum",
    "tanh",
]
