from .layers import (activation_backward, activation_forward, batchnorm_backward, batchnorm_forward,
                     conv1d_backward, conv1d_forward, conv_out_len, dense_backward, dense_forward, relu,
                     smoothed_cross_entropy)
from .model import (Architecture, ConvLayerParams, ForwardCache, ModelParams, build_model,
                    commit_running_stats, model_backward, model_forward, predict)
from .optim import AdamState, adam_step

__all__ = [
    "Architecture", "ConvLayerParams", "ForwardCache", "ModelParams", "AdamState",
    "activation_backward", "activation_forward", "adam_step", "batchnorm_backward", "batchnorm_forward",
    "build_model", "commit_running_stats", "conv1d_backward", "conv1d_forward", "conv_out_len",
    "dense_backward", "dense_forward", "model_backward", "model_forward", "predict", "relu",
    "smoothed_cross_entropy",
]
