"""Federated learning with feature and layer normalization."""

from ._core import (
    ConfigError,
    Dataset,
    DegenerateInputError,
    FednormError,
    FormatError,
    Model,
    NumericError,
    ShapeError,
    __version__,
    default_config,
    gaussian_mixture,
    load_model,
    mlp,
    model_from_checkpoint,
    mv_normalize,
    partition,
    run_experiment,
    scale_normalize,
    singular_values,
    spectral_gap,
    train_test_split,
    verify,
)

__all__ = [
    "ConfigError",
    "Dataset",
    "DegenerateInputError",
    "FednormError",
    "FormatError",
    "Model",
    "NumericError",
    "ShapeError",
    "__version__",
    "default_config",
    "gaussian_mixture",
    "load_model",
    "mlp",
    "model_from_checkpoint",
    "mv_normalize",
    "partition",
    "run_experiment",
    "scale_normalize",
    "singular_values",
    "spectral_gap",
    "train_test_split",
    "verify",
]
