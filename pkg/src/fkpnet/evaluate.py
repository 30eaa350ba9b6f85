"""Test-time prediction, RMSE metrics, and submission-file emission."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import DataError, FkpDataset
from .train import Checkpoint, restore_model


def predict(checkpoint: Checkpoint, test_dataset: FkpDataset,
            chunk: int = 256) -> np.ndarray:
    """Pixel-space (x, y) predictions for every image, one row per image.

    Applies the checkpoint's stored preprocessing: scale pixels to [0,1],
    subtract the saved feature mean, add a channel axis, then undo target
    normalization on the way out.
    """
    if test_dataset.normalized:
        raise DataError("predict expects raw images; normalization is stored "
                        "in the checkpoint")
    hw = checkpoint.geometry["input_hw"]
    if test_dataset.images.shape[1:] != (hw, hw):
        raise DataError(f"images are {test_dataset.images.shape[1:]}, "
                        f"model wants ({hw}, {hw})")
    model = restore_model(checkpoint)
    mean = checkpoint.feature_mean.reshape(hw, hw)
    outputs = []
    for start in range(0, len(test_dataset), chunk):
        x = test_dataset.images[start:start + chunk] / np.float32(255.0) - mean
        outputs.append(model.forward(x[:, None, :, :]))
    raw = (np.concatenate(outputs) if outputs
           else np.zeros((0, checkpoint.geometry["out_dim"]), dtype=np.float32))
    return checkpoint.norm_scale * raw + checkpoint.norm_offset


def rmse(y, y_hat) -> float:
    """Root of the mean squared difference over all entries."""
    a = np.asarray(y, dtype=np.float64).reshape(-1)
    b = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("rmse of empty sequences")
    return math.sqrt(float(np.mean(np.square(a - b))))


def average_rmse(values) -> float:
    """Root mean square of a sequence of per-model RMSE values.

    Scaled by the max first, so a constant sequence returns that constant
    bit-exactly (the naive mean-of-squares does not).
    """
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("average_rmse of an empty sequence")
    if np.any(arr < 0):
        raise ValueError("RMSE values cannot be negative")
    scale = float(arr.max())
    if scale == 0.0:
        return 0.0
    return scale * math.sqrt(float(np.mean(np.square(arr / scale))))


@dataclass
class PredictionSet:
    """Per-image, per-keypoint pixel predictions with their source models."""

    image_ids: np.ndarray                      # (n,) ints from the test file
    coords: dict = field(default_factory=dict)      # keypoint -> (n,2) pixels
    provenance: dict = field(default_factory=dict)  # keypoint -> checkpoint label

    def __post_init__(self):
        self._row_of = {int(i): r for r, i in enumerate(self.image_ids)}

    def add(self, keypoint: str, values: np.ndarray, source: str):
        if values.shape != (len(self.image_ids), 2):
            raise ValueError(f"{keypoint}: predictions have shape {values.shape}, "
                             f"want ({len(self.image_ids)}, 2)")
        self.coords[keypoint] = values
        self.provenance[keypoint] = source

    def lookup(self, image_id: int, feature: str) -> float:
        """Value for one lookup-table request like nose_tip_x of image 7."""
        if feature.endswith("_x"):
            keypoint, axis = feature[:-2], 0
        elif feature.endswith("_y"):
            keypoint, axis = feature[:-2], 1
        else:
            raise DataError(f"feature {feature!r} is not an _x/_y column")
        if keypoint not in self.coords:
            raise DataError(f"no predictions for keypoint {keypoint!r} "
                            f"(missing checkpoint?)")
        row = self._row_of.get(int(image_id))
        if row is None:
            raise DataError(f"no test image with id {image_id}")
        return float(self.coords[keypoint][row, axis])


def write_submission(records, predictions: PredictionSet, path,
                     clip: bool = False) -> int:
    """Emit RowId,Location rows in ascending RowId; returns the row count.

    `records` are (row_id, image_id, feature_name) from the lookup table.
    Values print with 6 decimals; clipping to [0, 95] is off unless asked.
    """
    ordered = sorted(records, key=lambda r: r[0])
    seen = set()
    lines = ["RowId,Location"]
    for row_id, image_id, feature in ordered:
        if row_id in seen:
            raise DataError(f"duplicate RowId {row_id}")
        seen.add(row_id)
        value = predictions.lookup(image_id, feature)
        if clip:
            value = min(max(value, 0.0), 95.0)
        lines.append(f"{row_id},{value:.6f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return len(ordered)
