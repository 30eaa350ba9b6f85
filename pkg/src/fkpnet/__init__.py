"""Facial keypoint detection with a small from-scratch CNN stack.

The package is layered bottom-up: ``tensor`` (RNG and initializers),
``layers`` and ``optim`` (the network engine), ``data`` (CSV parsing,
augmentation, normalization), ``train`` (training loop and checkpoints),
``evaluate`` (prediction, metrics, submission files), ``estimator``
(scikit-learn adapter), and ``cli`` (the ``fkpnet`` command).
"""

from .tensor import Rng
from .layers import (
    ShapeError,
    Model,
    build_keypoint_net,
    build_reduced_net,
    EXPECTED_PARAM_COUNT,
)
from .optim import Adam, mse_loss, grad_check
from .data import (
    DataError,
    FkpDataset,
    KEYPOINT_NAMES,
    default_schema,
    parse_training_csv,
    parse_test_csv,
    parse_id_lookup,
    hflip_augment,
    normalize,
    denormalize_targets,
    filter_nonmissing,
    split_80_20,
)
from .train import (
    TrainConfig,
    Checkpoint,
    CheckpointError,
    LossHistory,
    save_checkpoint,
    load_checkpoint,
    restore_model,
    train_model,
    train_all,
)
from .evaluate import predict, rmse, average_rmse, PredictionSet, write_submission
from .estimator import KeypointRegressor

__version__ = "1.0.0"

__all__ = [
    "Rng",
    "ShapeError",
    "Model",
    "build_keypoint_net",
    "build_reduced_net",
    "EXPECTED_PARAM_COUNT",
    "Adam",
    "mse_loss",
    "grad_check",
    "DataError",
    "FkpDataset",
    "KEYPOINT_NAMES",
    "default_schema",
    "parse_training_csv",
    "parse_test_csv",
    "parse_id_lookup",
    "hflip_augment",
    "normalize",
    "denormalize_targets",
    "filter_nonmissing",
    "split_80_20",
    "TrainConfig",
    "Checkpoint",
    "CheckpointError",
    "LossHistory",
    "save_checkpoint",
    "load_checkpoint",
    "restore_model",
    "train_model",
    "train_all",
    "predict",
    "rmse",
    "average_rmse",
    "PredictionSet",
    "write_submission",
    "KeypointRegressor",
]
