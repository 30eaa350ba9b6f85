"""Synthetic-file builders and small networks shared across test modules."""

import numpy as np

from fkpnet.data import PIXELS_PER_IMAGE, default_schema
from fkpnet.layers import build_keypoint_net
from fkpnet.tensor import Rng
from fkpnet.train import save_checkpoint, snapshot_checkpoint

SCHEMA = default_schema()


def pixel_blob(values=None, rng=None):
    if values is None:
        if rng is None:
            values = (i % 256 for i in range(PIXELS_PER_IMAGE))
        else:
            values = rng.integers(0, 256, size=PIXELS_PER_IMAGE)
    return " ".join(str(v) for v in values)


def write_training_csv(path, n_rows=8, seed=0):
    """Fully-labeled synthetic training file with varied targets."""
    rng = np.random.default_rng(seed)
    lines = [",".join(list(SCHEMA.columns) + ["Image"])]
    for _ in range(n_rows):
        targets = [f"{v:.4f}" for v in rng.uniform(20, 75, size=30)]
        lines.append(",".join(targets + [pixel_blob(rng=rng)]))
    path.write_text("\n".join(lines) + "\n")
    return path


def write_test_csv(path, n_rows=3, seed=1):
    rng = np.random.default_rng(seed)
    lines = ["ImageId,Image"]
    for i in range(1, n_rows + 1):
        lines.append(f"{i},{pixel_blob(rng=rng)}")
    path.write_text("\n".join(lines) + "\n")
    return path


def write_lookup_csv(path, records):
    """records: (row_id, image_id, feature_name) triples."""
    lines = ["RowId,ImageId,FeatureName,Location"]
    for row_id, image_id, feature in records:
        lines.append(f"{row_id},{image_id},{feature},")
    path.write_text("\n".join(lines) + "\n")
    return path


def tiny_build(rng, dtype=np.float32):
    """Full-size input, thin everything else; fast to train and run."""
    return build_keypoint_net(rng, filters=(2, 2, 2, 2), dense_units=(4, 4),
                              dtype=dtype)


def write_stub_checkpoint(path, keypoint, seed=0, zero=False):
    model = tiny_build(Rng(seed))
    ckpt = snapshot_checkpoint(
        model, keypoint=keypoint, arch="custom", geometry=model.geometry,
        feature_mean=np.zeros(PIXELS_PER_IMAGE, dtype=np.float32),
        seed=seed, config={}, best_epoch=1, best_val_rmse=1.0)
    if zero:
        ckpt.values = np.zeros_like(ckpt.values)
    save_checkpoint(ckpt, path)
    return path
