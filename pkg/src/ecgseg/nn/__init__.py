from .layers import (
    BiLstmLayer,
    Conv1DLayer,
    LstmCell,
    bilstm_backward,
    bilstm_forward,
    ccel_loss,
    conv1d_backward,
    conv1d_forward,
    dense_backward,
    dense_forward,
    dense_softmax_forward,
    dropout,
    lstm_backward,
    lstm_forward,
    lstm_step,
    softmax,
)
from .model import (
    ForwardCache,
    Model,
    ModelConfig,
    check_params,
    init_params,
    model_backward,
    model_forward,
    param_breakdown,
    param_count,
)

__all__ = [
    "BiLstmLayer",
    "Conv1DLayer",
    "ForwardCache",
    "LstmCell",
    "Model",
    "ModelConfig",
    "bilstm_backward",
    "bilstm_forward",
    "ccel_loss",
    "check_params",
    "conv1d_backward",
    "conv1d_forward",
    "dense_backward",
    "dense_forward",
    "dense_softmax_forward",
    "dropout",
    "init_params",
    "lstm_backward",
    "lstm_forward",
    "lstm_step",
    "model_backward",
    "model_forward",
    "param_breakdown",
    "param_count",
    "softmax",
]
