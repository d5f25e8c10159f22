from .gradcheck import grad_check
from .ops import (
    add, attention_weights, bce_loss, binary_cross_entropy, conv1d_forward,
    dense_forward, dropout, gru_cell_forward, layer_norm_forward, lstm_cell_forward,
    matmul, mean_all, mul, relu, reshape, scale, self_attention_forward, sigmoid, slice_last,
    stack_time, sub, sum_all, take_time, tanh,
)
from .optim import AdamState, adam_step
from .tensor import Param, Tape, Tensor, backward

__all__ = [
    "AdamState", "Param", "Tape", "Tensor", "adam_step", "add", "attention_weights",
    "backward", "bce_loss", "binary_cross_entropy", "conv1d_forward", "dense_forward",
    "dropout", "grad_check", "gru_cell_forward", "layer_norm_forward",
    "lstm_cell_forward", "matmul", "mean_all", "mul", "relu", "reshape", "scale",
    "self_attention_forward", "sigmoid", "slice_last", "stack_time", "sub", "sum_all",
    "take_time", "tanh",
]
