from .checkpoint import load_checkpoint, save_checkpoint
from .functional import (
    cross_entropy,
    dropout_mask,
    one_hot,
    softmax,
    softmax_cross_entropy,
    stochastic_depth_gate,
    survival_probability,
)
from .model import (
    ForwardTrace,
    LayerSpec,
    Model,
    arch_rank,
    backward,
    build_model,
    forward,
    init_params,
    replay,
    zero_model,
)
from .optim import init_momentum, sgd_step

__all__ = [
    "ForwardTrace",
    "LayerSpec",
    "Model",
    "arch_rank",
    "backward",
    "build_model",
    "cross_entropy",
    "dropout_mask",
    "forward",
    "init_momentum",
    "init_params",
    "load_checkpoint",
    "one_hot",
    "replay",
    "save_checkpoint",
    "sgd_step",
    "softmax",
    "softmax_cross_entropy",
    "stochastic_depth_gate",
    "survival_probability",
    "zero_model",
]
