"""Self-attention classifier: network, kernels, optimizer, checkpoints."""

from .kernels import BACKEND
from .network import (
    HyperParams,
    IncompatibleHeads,
    MissingTrace,
    ModelParameters,
    ShapeMismatch,
    backward,
    forward,
    init_model,
    parameter_shapes,
    predict_proba,
)
from .optim import OptimizerState, adamw_step

__all__ = [
    "BACKEND",
    "HyperParams",
    "IncompatibleHeads",
    "MissingTrace",
    "ModelParameters",
    "OptimizerState",
    "ShapeMismatch",
    "adamw_step",
    "backward",
    "forward",
    "init_model",
    "parameter_shapes",
    "predict_proba",
]
