"""PCA-projection structured pruning for toy transformers.

Pipeline: train a toy model, collect calibration features, inject PCA
projections, train masks under an expected-sparsity constraint, binarize,
then fuse everything into a smaller model with identical outputs.
"""
from .calibration import CalibrationFeatures, collect, energy_profile, spectrum_report
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    InputError,
    NumericError,
    PruneError,
    TrainingError,
    VerificationError,
)
from .fusing import FusedModel, fuse, fused_forward, prune_zeros, size_report
from .masks import MaskSet, mask_layout
from .model import MajorityTask, ModelConfig, TransformerModel, forward, forward_masked, forward_projected
from .projection import (
    ProjectedModel,
    ProjectionSet,
    group_pca,
    hidden_projection,
    inject,
    qk_projection,
    v_projection,
)
from .pruning import (
    LagrangeState,
    Schedule,
    SparsityReport,
    binarize,
    expected_retained,
    pruning_loss,
    random_pruning,
    train_masks,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationFeatures", "ConfigError", "ContractError", "DimensionError", "FormatError",
    "FusedModel", "InputError", "LagrangeState", "MajorityTask", "MaskSet", "ModelConfig",
    "NumericError", "ProjectedModel", "ProjectionSet", "PruneError", "Schedule", "SparsityReport",
    "TrainingError", "TransformerModel", "VerificationError", "binarize", "collect",
    "energy_profile", "expected_retained", "forward", "forward_masked", "forward_projected",
    "fuse", "fused_forward", "group_pca", "hidden_projection", "inject", "mask_layout",
    "prune_zeros", "pruning_loss", "qk_projection", "random_pruning", "size_report",
    "spectrum_report", "train_masks", "v_projection",
]
