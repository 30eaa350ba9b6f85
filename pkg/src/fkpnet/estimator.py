"""Scikit-learn style regressor wrapping the keypoint training pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .data import FkpDataset, IMAGE_HW, PIXELS_PER_IMAGE, normalize
from .evaluate import predict as checkpoint_predict
from .layers import build_keypoint_net
from .train import TrainConfig, train_filtered


def check_image_array(X) -> np.ndarray:
    """Accept (n,96,96), (n,9216) or (n,1,96,96) raw images as (n,96,96)."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2 and X.shape[1] == PIXELS_PER_IMAGE:
        X = X.reshape(-1, IMAGE_HW, IMAGE_HW)
    elif X.ndim == 4 and X.shape[1:] == (1, IMAGE_HW, IMAGE_HW):
        X = X[:, 0]
    if X.ndim != 3 or X.shape[1:] != (IMAGE_HW, IMAGE_HW):
        raise ValueError(f"X must be (n, 96, 96), (n, 9216) or (n, 1, 96, 96); "
                         f"got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    if X.size and (X.min() < 0 or X.max() > 255):
        raise ValueError("X must hold raw pixel values in [0, 255]")
    return X


def check_coordinate_array(y, n_samples: int) -> np.ndarray:
    """Accept (n, 2) pixel-space coordinate targets."""
    y = np.asarray(y, dtype=np.float32)
    if y.shape != (n_samples, 2):
        raise ValueError(f"y must be ({n_samples}, 2); got {y.shape}")
    if not np.isfinite(y).all():
        raise ValueError("y contains non-finite values")
    return y


class KeypointRegressor(BaseEstimator, RegressorMixin):
    """Maps a 96x96 grayscale face to one (x, y) landmark in pixel space.

    fit() runs the full training protocol on raw inputs: pixel scaling to
    [0,1], an 80/20 split, feature-mean centering, minibatch Adam with early
    stopping, and best-validation-epoch weight selection. `network="compact"`
    swaps in a thin copy of the architecture for fast smoke runs.
    """

    def __init__(self, max_epochs: int = 300, batch_size: int = 128,
                 patience: int = 30, seed: int = 0, dtype: str = "float32",
                 network: str = "full"):
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.patience = patience
        self.seed = seed
        self.dtype = dtype
        self.network = network

    def _build_fn(self):
        if self.network == "full":
            return None
        if self.network == "compact":
            return lambda rng, dtype: build_keypoint_net(
                rng, filters=(2, 2, 2, 2), dense_units=(4, 4), dtype=dtype)
        raise ValueError(f"network must be 'full' or 'compact', got {self.network!r}")

    def fit(self, X, y):
        X = check_image_array(X)
        y = check_coordinate_array(y, X.shape[0])
        if X.shape[0] < 5:
            raise ValueError("need at least 5 samples to hold out a validation split")
        build_fn = self._build_fn()
        config = TrainConfig(keypoint_index=0, batch_size=self.batch_size,
                             max_epochs=self.max_epochs, patience=self.patience,
                             seed=self.seed, dtype=self.dtype)
        dataset = normalize(FkpDataset(X, y, np.ones_like(y, dtype=bool)))
        checkpoint, history = train_filtered(dataset, "keypoint", config,
                                             build_fn=build_fn)
        self.checkpoint_ = checkpoint
        self.feature_mean_ = checkpoint.feature_mean
        self.history_ = history
        self.best_epoch_ = checkpoint.best_epoch
        self.n_features_in_ = PIXELS_PER_IMAGE
        return self

    def predict(self, X):
        check_is_fitted(self, "checkpoint_")
        X = check_image_array(X)
        return checkpoint_predict(self.checkpoint_, FkpDataset(X, None, None))
