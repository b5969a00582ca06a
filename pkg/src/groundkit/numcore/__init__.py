"""Minimal dense numeric kernel with reverse-mode differentiation."""

from .tensor import (
    Graph,
    NumericError,
    Tensor,
    add,
    concat_cols,
    concat_rows,
    dot_const,
    gather_rows,
    gelu,
    l2_normalize_rows,
    layer_norm,
    log_softmax,
    matmul,
    matvec,
    mean_all,
    mul,
    neg,
    row_vector,
    scale,
    slice_cols,
    slice_rows,
    softmax,
    sub,
    sum_all,
    take_per_row,
    transpose,
)
from .encoder import EncoderConfig, attention_layer, encode, init_encoder_params, linear
from .optim import AdamState, init_adam_state, optimizer_step
from .gradcheck import grad_check
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "AdamState", "CheckpointError", "EncoderConfig", "Graph", "NumericError",
    "Tensor", "add", "attention_layer", "concat_cols", "concat_rows",
    "dot_const", "encode", "gather_rows", "gelu", "grad_check",
    "init_adam_state", "init_encoder_params", "l2_normalize_rows",
    "layer_norm", "linear", "load_checkpoint", "log_softmax", "matmul",
    "matvec", "mean_all", "mul", "neg", "optimizer_step", "row_vector",
    "save_checkpoint", "scale", "slice_cols", "slice_rows", "softmax", "sub",
    "sum_all", "take_per_row", "transpose",
]
