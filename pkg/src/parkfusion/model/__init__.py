from .calendar import calendar_encoding, calendar_matrix
from .layers import (
    ConfigurationError,
    feed_forward,
    layer_norm,
    multi_head_attention,
    scaled_dot_attention,
)
from .optim import AdamState, adam_step
from .tensor import GraphError, Tensor, mac_counter, no_grad
from .train import TrainingDiverged, train
from .transformer import ModelConfig, TrainedModel, forward, forward_tensors, init_params, param_shapes

__all__ = [
    "AdamState",
    "ConfigurationError",
    "GraphError",
    "ModelConfig",
    "Tensor",
    "TrainedModel",
    "TrainingDiverged",
    "adam_step",
    "calendar_encoding",
    "calendar_matrix",
    "feed_forward",
    "forward",
    "forward_tensors",
    "init_params",
    "layer_norm",
    "mac_counter",
    "multi_head_attention",
    "no_grad",
    "param_shapes",
    "scaled_dot_attention",
    "train",
]
