from .config import ARCHS, ModelConfig
from .data import MajorityTask, majority_label
from .training import Adam, accuracy, evaluate, train_toy
from .transformer import (
    NORM_EPS,
    TransformerModel,
    check_tokens,
    forward,
    forward_masked,
    forward_params,
    forward_projected,
    init_model,
    masked_params,
    param_shapes,
    projected_params,
)

__all__ = [
    "ARCHS", "Adam", "MajorityTask", "ModelConfig", "NORM_EPS", "TransformerModel",
    "accuracy", "check_tokens", "evaluate", "forward", "forward_masked",
    "forward_params", "forward_projected", "init_model", "majority_label",
    "masked_params", "param_shapes", "projected_params", "train_toy",
]
