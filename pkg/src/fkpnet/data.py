"""Keypoint CSV ingestion, flip augmentation, normalization, splitting, batching.

File formats (Kaggle facial-keypoints layout):
  training.csv  — 30 target columns then "Image"; targets may be empty; Image
                  is 9216 space-separated integers, row-major 96x96.
  test.csv      — "ImageId,Image" with the same pixel encoding.
  IdLookupTable.csv — "RowId,ImageId,FeatureName,Location"; Location ignored.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .tensor import Rng

IMAGE_HW = 96
PIXELS_PER_IMAGE = IMAGE_HW * IMAGE_HW
N_KEYPOINTS = 15
N_TARGET_COLUMNS = 2 * N_KEYPOINTS

KEYPOINT_NAMES = (
    "left_eye_center",
    "right_eye_center",
    "left_eye_inner_corner",
    "left_eye_outer_corner",
    "right_eye_inner_corner",
    "right_eye_outer_corner",
    "left_eyebrow_inner_end",
    "left_eyebrow_outer_end",
    "right_eyebrow_inner_end",
    "right_eyebrow_outer_end",
    "nose_tip",
    "mouth_left_corner",
    "mouth_right_corner",
    "mouth_center_top_lip",
    "mouth_center_bottom_lip",
)

# keypoints exchanged under a horizontal mirror; the rest keep their column
_SWAPPED_KEYPOINTS = (
    ("left_eye_center", "right_eye_center"),
    ("left_eye_inner_corner", "right_eye_inner_corner"),
    ("left_eye_outer_corner", "right_eye_outer_corner"),
    ("left_eyebrow_inner_end", "right_eyebrow_inner_end"),
    ("left_eyebrow_outer_end", "right_eyebrow_outer_end"),
    ("mouth_left_corner", "mouth_right_corner"),
)


class DataError(ValueError):
    """Malformed input file or misuse of a dataset operation."""


@dataclass(frozen=True)
class KeypointSchema:
    """Names and column layout of the 15 keypoints, plus the mirror swap map."""

    names: tuple[str, ...]
    columns: tuple[str, ...]           # name_x, name_y per keypoint, in order
    swap_pairs: tuple[tuple[str, str], ...]  # 12 column pairs
    fixed_columns: tuple[str, ...]           # 6 columns untouched by the swap

    def column_index(self, column: str) -> int:
        try:
            return self.columns.index(column)
        except ValueError:
            raise DataError(f"unknown target column {column!r}") from None

    def keypoint_index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"unknown keypoint {name!r}") from None

    def swap_permutation(self) -> np.ndarray:
        """Column permutation applied to targets under a horizontal flip."""
        perm = np.arange(len(self.columns))
        for a, b in self.swap_pairs:
            ia, ib = self.column_index(a), self.column_index(b)
            perm[ia], perm[ib] = perm[ib], perm[ia]
        return perm


def default_schema() -> KeypointSchema:
    columns = tuple(f"{name}_{axis}" for name in KEYPOINT_NAMES for axis in ("x", "y"))
    swapped = set()
    swap_pairs = []
    for a, b in _SWAPPED_KEYPOINTS:
        for axis in ("x", "y"):
            swap_pairs.append((f"{a}_{axis}", f"{b}_{axis}"))
            swapped.update(swap_pairs[-1])
    fixed = tuple(c for c in columns if c not in swapped)
    return KeypointSchema(KEYPOINT_NAMES, columns, tuple(swap_pairs), fixed)


@dataclass
class FkpDataset:
    """Images with optional per-column targets.

    Missing targets are carried as an explicit boolean mask, never as a
    sentinel value; entries where the mask is False are zero and meaningless.
    """

    images: np.ndarray                 # (n, 96, 96) float32
    targets: np.ndarray | None         # (n, k) float32
    target_mask: np.ndarray | None     # (n, k) bool, True = present
    normalized: bool = False
    image_ids: np.ndarray | None = None  # test-set ImageId column

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, idx: np.ndarray) -> "FkpDataset":
        return FkpDataset(
            self.images[idx],
            None if self.targets is None else self.targets[idx],
            None if self.target_mask is None else self.target_mask[idx],
            self.normalized,
            None if self.image_ids is None else self.image_ids[idx],
        )


def _parse_pixels(field: str, row: int) -> np.ndarray:
    try:
        vals = np.array(field.split(), dtype=np.int64)
    except ValueError:
        raise DataError(f"row {row}: unparseable pixel value") from None
    if vals.size != PIXELS_PER_IMAGE:
        raise DataError(f"row {row}: expected {PIXELS_PER_IMAGE} pixels, got {vals.size}")
    if vals.min(initial=0) < 0 or vals.max(initial=0) > 255:
        raise DataError(f"row {row}: pixel outside [0, 255]")
    return vals.astype(np.float32).reshape(IMAGE_HW, IMAGE_HW)


def parse_training_csv(path, schema: KeypointSchema | None = None,
                       limit_rows: int | None = None) -> FkpDataset:
    """Read a training file: 30 optional targets plus the pixel blob per row."""
    schema = schema or default_schema()
    expected_header = list(schema.columns) + ["Image"]
    images, targets, masks = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected_header:
            raise DataError(f"{path}: header does not match the expected "
                            f"{len(expected_header)} columns")
        for i, row in enumerate(reader):
            if limit_rows is not None and len(images) >= limit_rows:
                break
            if len(row) != len(expected_header):
                raise DataError(f"row {i}: expected {len(expected_header)} fields, "
                                f"got {len(row)}")
            t = np.zeros(N_TARGET_COLUMNS, dtype=np.float32)
            m = np.zeros(N_TARGET_COLUMNS, dtype=bool)
            for j, field in enumerate(row[:-1]):
                field = field.strip()
                if not field:
                    continue
                try:
                    t[j] = float(field)
                except ValueError:
                    raise DataError(f"row {i}: unparseable value in column "
                                    f"{schema.columns[j]}") from None
                m[j] = True
            images.append(_parse_pixels(row[-1], i))
            targets.append(t)
            masks.append(m)
    n = len(images)
    return FkpDataset(
        np.stack(images) if n else np.zeros((0, IMAGE_HW, IMAGE_HW), dtype=np.float32),
        np.stack(targets) if n else np.zeros((0, N_TARGET_COLUMNS), dtype=np.float32),
        np.stack(masks) if n else np.zeros((0, N_TARGET_COLUMNS), dtype=bool),
    )


def parse_test_csv(path, limit_rows: int | None = None) -> FkpDataset:
    """Read a test file: ImageId plus the pixel blob, no targets."""
    images, ids = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["ImageId", "Image"]:
            raise DataError(f"{path}: expected header ImageId,Image")
        for i, row in enumerate(reader):
            if limit_rows is not None and len(images) >= limit_rows:
                break
            if len(row) != 2:
                raise DataError(f"row {i}: expected 2 fields, got {len(row)}")
            try:
                ids.append(int(row[0]))
            except ValueError:
                raise DataError(f"row {i}: unparseable ImageId {row[0]!r}") from None
            images.append(_parse_pixels(row[1], i))
    n = len(images)
    return FkpDataset(
        np.stack(images) if n else np.zeros((0, IMAGE_HW, IMAGE_HW), dtype=np.float32),
        None, None, image_ids=np.array(ids, dtype=np.int64),
    )


def parse_id_lookup(path, schema: KeypointSchema | None = None):
    """Read the prediction request table as (row_id, image_id, feature_name)."""
    schema = schema or default_schema()
    valid = set(schema.columns)
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["RowId", "ImageId", "FeatureName"]:
            raise DataError(f"{path}: expected header RowId,ImageId,FeatureName,...")
        for i, row in enumerate(reader):
            if len(row) < 3:
                raise DataError(f"row {i}: expected at least 3 fields")
            try:
                row_id, image_id = int(row[0]), int(row[1])
            except ValueError:
                raise DataError(f"row {i}: unparseable RowId/ImageId") from None
            feature = row[2]
            if feature not in valid:
                raise DataError(f"row {i}: unknown feature {feature!r}")
            records.append((row_id, image_id, feature))
    return records


def hflip_augment(dataset: FkpDataset, schema: KeypointSchema | None = None) -> FkpDataset:
    """Append a mirrored copy of every fully-labeled row.

    Mirroring maps pixel column j to 95-j and x-coordinates to 95-x; left/right
    keypoint columns are exchanged so labels still name the correct landmark.
    Originals keep their positions; flipped rows follow them.
    """
    schema = schema or default_schema()
    if dataset.normalized:
        raise DataError("augmentation runs on raw data, before normalization")
    if dataset.targets is None:
        raise DataError("augmentation needs target columns")
    full = dataset.target_mask.all(axis=1)
    flipped_images = dataset.images[full][:, :, ::-1]
    t = dataset.targets[full].copy()
    t[:, 0::2] = (IMAGE_HW - 1) - t[:, 0::2]     # x columns; y unchanged
    t = t[:, schema.swap_permutation()]
    return FkpDataset(
        np.concatenate([dataset.images, flipped_images]),
        np.concatenate([dataset.targets, t]),
        np.concatenate([dataset.target_mask, np.ones_like(t, dtype=bool)]),
    )


def normalize(dataset: FkpDataset) -> FkpDataset:
    """Scale pixels to [0,1] and targets to [-1,1]."""
    if dataset.normalized:
        raise DataError("dataset is already normalized")
    targets = mask = None
    if dataset.targets is not None:
        targets = np.where(dataset.target_mask,
                           normalize_targets(dataset.targets), 0.0).astype(np.float32)
        mask = dataset.target_mask.copy()
    return FkpDataset(dataset.images / np.float32(255.0), targets, mask,
                      normalized=True, image_ids=dataset.image_ids)


def normalize_targets(values: np.ndarray) -> np.ndarray:
    return (values - 48.0) / 48.0


def denormalize_targets(values: np.ndarray) -> np.ndarray:
    return 48.0 * values + 48.0


def filter_nonmissing(dataset: FkpDataset, keypoint_index: int) -> FkpDataset:
    """Keep rows where both coordinates of one keypoint are present;
    targets shrink to that keypoint's (x, y) pair."""
    if not 0 <= keypoint_index < N_KEYPOINTS:
        raise ValueError(f"keypoint_index {keypoint_index} outside 0..{N_KEYPOINTS - 1}")
    cx, cy = 2 * keypoint_index, 2 * keypoint_index + 1
    keep = dataset.target_mask[:, cx] & dataset.target_mask[:, cy]
    return FkpDataset(
        dataset.images[keep],
        dataset.targets[keep][:, [cx, cy]],
        np.ones((int(keep.sum()), 2), dtype=bool),
        dataset.normalized,
    )


def nonmissing_counts(dataset: FkpDataset) -> list[int]:
    """Rows with both coordinates present, per keypoint."""
    m = dataset.target_mask
    return [int((m[:, 2 * k] & m[:, 2 * k + 1]).sum()) for k in range(N_KEYPOINTS)]


def split_80_20(dataset: FkpDataset, rng: Rng) -> tuple[FkpDataset, FkpDataset]:
    """Shuffled disjoint split; the first ceil(0.8 n) rows go to the train side."""
    n = len(dataset)
    if n < 5:
        raise DataError(f"need at least 5 rows to split, have {n}")
    order = rng.permutation(n)
    cut = (4 * n + 4) // 5          # ceil(0.8 n) in exact integer arithmetic
    return dataset.take(order[:cut]), dataset.take(order[cut:])


def featurewise_mean(dataset: FkpDataset) -> np.ndarray:
    """Per-pixel mean over all rows, as a flat 9216-vector."""
    if not dataset.normalized:
        raise DataError("feature mean is defined on normalized pixels")
    if len(dataset) == 0:
        raise DataError("feature mean of an empty dataset")
    flat = dataset.images.reshape(len(dataset), PIXELS_PER_IMAGE)
    return flat.mean(axis=0, dtype=np.float64).astype(np.float32)


def center(dataset: FkpDataset, mean: np.ndarray) -> FkpDataset:
    """Subtract a feature mean (from some train split) from every image."""
    if mean.shape != (PIXELS_PER_IMAGE,):
        raise DataError(f"feature mean must have shape ({PIXELS_PER_IMAGE},)")
    images = dataset.images - mean.reshape(IMAGE_HW, IMAGE_HW).astype(np.float32)
    return replace(dataset, images=images)


def batches(dataset: FkpDataset, rng: Rng, batch_size: int = 128):
    """Yield shuffled (input, target) minibatches; the final one may be short.

    Inputs gain a channel axis: (b, 1, 96, 96). Each call reshuffles with the
    supplied generator, so successive epochs see different orders.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = rng.permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx][:, None, :, :], dataset.targets[idx]
