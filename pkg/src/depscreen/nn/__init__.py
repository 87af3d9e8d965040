from .checkpoint import load_checkpoint, save_checkpoint
from .model import (
    ARCHS,
    EvalMode,
    HeadView,
    Mode,
    Model,
    ModelConfig,
    ParamGroup,
    TrainMode,
    build_model,
    forward,
    loss_and_grads,
    set_frozen,
    sgd_step,
)

__all__ = [
    "ARCHS",
    "EvalMode",
    "HeadView",
    "Mode",
    "Model",
    "ModelConfig",
    "ParamGroup",
    "TrainMode",
    "build_model",
    "forward",
    "load_checkpoint",
    "loss_and_grads",
    "save_checkpoint",
    "set_frozen",
    "sgd_step",
]
