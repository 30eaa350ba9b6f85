"""Per-keypoint training with early stopping and best-weights checkpointing.

Checkpoint file layout: one JSON manifest line, then little-endian float32
values (parameters in manifest order, then the stored feature mean).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import (
    DataError,
    FkpDataset,
    KeypointSchema,
    batches,
    center,
    featurewise_mean,
    filter_nonmissing,
    normalize,
    split_80_20,
)
from .layers import Model, build_keypoint_net
from .optim import Adam, mse_loss
from .tensor import Rng

CHECKPOINT_VERSION = 1
STANDARD_TOTAL = 7_488_962
PX_PER_UNIT = 48.0  # normalized-to-pixel scale; also the coordinate offset


@dataclass
class TrainConfig:
    keypoint_index: int = 0
    batch_size: int = 128
    max_epochs: int = 300
    patience: int = 30
    seed: int = 0
    dtype: str = "float32"
    out_dir: str | None = None

    def __post_init__(self):
        if not 0 <= self.keypoint_index < 15:
            raise ValueError(f"keypoint_index {self.keypoint_index} outside 0..14")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        # patience >= max_epochs is fine: early stopping simply never fires
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


class LossHistory:
    """Per-epoch RMSE records, normalized and pixel space."""

    CSV_HEADER = "epoch,train_rmse_norm,val_rmse_norm,train_rmse_px,val_rmse_px"

    def __init__(self):
        self.epochs: list[int] = []
        self.train_rmse_norm: list[float] = []
        self.val_rmse_norm: list[float] = []

    def append(self, epoch: int, train_rmse: float, val_rmse: float):
        if epoch != len(self.epochs) + 1:
            raise ValueError(f"epochs must be contiguous from 1; got {epoch} "
                             f"after {len(self.epochs)}")
        self.epochs.append(epoch)
        self.train_rmse_norm.append(float(train_rmse))
        self.val_rmse_norm.append(float(val_rmse))

    def __len__(self):
        return len(self.epochs)

    @property
    def train_rmse_px(self):
        return [PX_PER_UNIT * v for v in self.train_rmse_norm]

    @property
    def val_rmse_px(self):
        return [PX_PER_UNIT * v for v in self.val_rmse_norm]

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(self.CSV_HEADER + "\n")
            for i, epoch in enumerate(self.epochs):
                fh.write(f"{epoch},{self.train_rmse_norm[i]!r},"
                         f"{self.val_rmse_norm[i]!r},"
                         f"{self.train_rmse_px[i]!r},{self.val_rmse_px[i]!r}\n")


@dataclass
class Checkpoint:
    """Best-epoch weights plus everything needed to reproduce predictions."""

    keypoint: str
    arch: str                       # "standard" or "custom"
    geometry: dict                  # input_hw, filters, kernels, dense_units, out_dim
    manifest: list                  # [name, [shape...]] per parameter, in order
    values: np.ndarray              # flat float32, manifest order
    feature_mean: np.ndarray        # float32, one entry per input pixel
    seed: int
    config: dict                    # config echo
    best_epoch: int
    best_val_rmse: float            # normalized space
    norm_offset: float = PX_PER_UNIT
    norm_scale: float = PX_PER_UNIT
    version: int = CHECKPOINT_VERSION

    def total_values(self) -> int:
        return sum(math.prod(shape) for _, shape in self.manifest)


class CheckpointError(ValueError):
    pass


def snapshot_checkpoint(model: Model, *, keypoint: str, arch: str, geometry: dict,
                        feature_mean: np.ndarray, seed: int, config: dict,
                        best_epoch: int, best_val_rmse: float) -> Checkpoint:
    params = model.parameters()
    manifest = [[p.name, list(p.data.shape)] for p in params]
    values = np.concatenate([np.ascontiguousarray(p.data, dtype=np.float32).reshape(-1)
                             for p in params])
    return Checkpoint(
        keypoint=keypoint, arch=arch, geometry=geometry, manifest=manifest,
        values=values, feature_mean=feature_mean.astype(np.float32),
        seed=seed, config=config, best_epoch=best_epoch,
        best_val_rmse=float(best_val_rmse),
    )


def save_checkpoint(checkpoint: Checkpoint, path):
    if checkpoint.arch == "standard" and checkpoint.total_values() != STANDARD_TOTAL:
        raise CheckpointError(f"standard-architecture checkpoint must carry "
                              f"{STANDARD_TOTAL} values, has {checkpoint.total_values()}")
    header = {
        "version": checkpoint.version,
        "keypoint": checkpoint.keypoint,
        "arch": checkpoint.arch,
        "geometry": checkpoint.geometry,
        "manifest": checkpoint.manifest,
        "n_values": int(checkpoint.values.size),
        "mean_len": int(checkpoint.feature_mean.size),
        "norm_offset": checkpoint.norm_offset,
        "norm_scale": checkpoint.norm_scale,
        "seed": checkpoint.seed,
        "config": checkpoint.config,
        "best_epoch": checkpoint.best_epoch,
        "best_val_rmse": checkpoint.best_val_rmse,
    }
    values = np.ascontiguousarray(checkpoint.values, dtype="<f4")
    mean = np.ascontiguousarray(checkpoint.feature_mean, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(values.tobytes())
        fh.write(mean.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError("checkpoint has no manifest line")
    try:
        header = json.loads(raw[:nl].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    manifest = [[name, list(shape)] for name, shape in header["manifest"]]
    declared = sum(math.prod(shape) for _, shape in manifest)
    n_values, mean_len = header["n_values"], header["mean_len"]
    if declared != n_values:
        raise CheckpointError(f"manifest shapes give {declared} values "
                              f"but header declares {n_values}")
    if header["arch"] == "standard" and declared != STANDARD_TOTAL:
        raise CheckpointError(f"standard-architecture checkpoint must carry "
                              f"{STANDARD_TOTAL} values, has {declared}")
    body = raw[nl + 1:]
    expected = 4 * (n_values + mean_len)
    if len(body) != expected:
        raise CheckpointError(f"checkpoint body is {len(body)} bytes, expected "
                              f"{expected} ({expected - len(body)} missing)")
    flat = np.frombuffer(body, dtype="<f4")
    return Checkpoint(
        keypoint=header["keypoint"], arch=header["arch"],
        geometry=header["geometry"], manifest=manifest,
        values=flat[:n_values].copy(), feature_mean=flat[n_values:].copy(),
        seed=header["seed"], config=header["config"],
        best_epoch=header["best_epoch"], best_val_rmse=header["best_val_rmse"],
        norm_offset=header["norm_offset"], norm_scale=header["norm_scale"],
        version=header["version"],
    )


def restore_model(checkpoint: Checkpoint, dtype=np.float32) -> Model:
    """Rebuild the network a checkpoint describes and load its weights."""
    g = checkpoint.geometry
    model = build_keypoint_net(
        Rng(0), input_hw=g["input_hw"], filters=tuple(g["filters"]),
        kernels=tuple(g["kernels"]), dense_units=tuple(g["dense_units"]),
        out_dim=g["out_dim"], dtype=dtype,
    )
    params = model.parameters()
    if [[p.name, list(p.data.shape)] for p in params] != checkpoint.manifest:
        raise CheckpointError("checkpoint manifest does not match the rebuilt network")
    offset = 0
    for p in params:
        n = p.data.size
        p.data[:] = checkpoint.values[offset:offset + n].reshape(p.data.shape)
        offset += n
    model.eval()
    return model


def full_pass_rmse(model: Model, images: np.ndarray, targets: np.ndarray,
                   chunk: int = 256) -> float:
    """Eval-mode RMSE over a whole split, computed in memory-bounded chunks."""
    model.eval()
    total = 0.0
    for start in range(0, images.shape[0], chunk):
        x = images[start:start + chunk][:, None, :, :]
        diff = model.forward(x) - targets[start:start + chunk]
        total += float(np.dot(diff.reshape(-1), diff.reshape(-1)))
    return math.sqrt(total / targets.size)


def _standard_geometry() -> dict:
    return {"input_hw": 96, "filters": [32, 64, 128, 256],
            "kernels": [4, 3, 2, 1], "dense_units": [1000, 1000], "out_dim": 2}


def train_model(dataset: FkpDataset, schema: KeypointSchema, config: TrainConfig,
                *, build_fn=None, val_loss_fn=None) -> tuple[Checkpoint, LossHistory]:
    """Train one keypoint model; returns the best-epoch weights, never the last.

    `build_fn(rng, dtype) -> Model` substitutes the network (tests use small
    ones); `val_loss_fn(model, val_x, val_y, epoch) -> float` substitutes the
    quantity that drives early stopping and best-weights selection.
    """
    kp = config.keypoint_index
    filtered = filter_nonmissing(dataset, kp)
    if len(filtered) == 0:
        raise DataError(f"no rows carry both coordinates of {schema.names[kp]}")
    if not filtered.normalized:
        filtered = normalize(filtered)
    return train_filtered(filtered, schema.names[kp], config,
                          build_fn=build_fn, val_loss_fn=val_loss_fn)


def train_filtered(filtered: FkpDataset, keypoint_name: str, config: TrainConfig,
                   *, build_fn=None, val_loss_fn=None) -> tuple[Checkpoint, LossHistory]:
    """Core loop on an already-filtered, normalized two-column dataset."""
    rng = Rng(config.seed)
    train_split, val_split = split_80_20(filtered, rng)
    if len(val_split) < 1:
        raise DataError("validation split is empty")
    mean = featurewise_mean(train_split)
    train_split = center(train_split, mean)
    val_split = center(val_split, mean)

    dtype = config.np_dtype()
    if build_fn is None:
        model = build_keypoint_net(rng, dtype=dtype)
        arch, geometry = "standard", _standard_geometry()
    else:
        model = build_fn(rng, dtype)
        if model.geometry is None:
            raise ValueError("build_fn must return a model with geometry set")
        arch, geometry = "custom", model.geometry
    model.set_rng(rng)
    optimizer = Adam(model.parameters())

    val_x = val_split.images[:, None, :, :]
    val_y = val_split.targets
    history = LossHistory()
    best_metric = math.inf
    best_epoch = 0
    best_params = None
    epochs_since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        for xb, yb in batches(train_split, rng, config.batch_size):
            out = model.forward(xb)
            _, grad = mse_loss(out, yb)
            model.backward(grad)
            optimizer.step()

        train_rmse = full_pass_rmse(model, train_split.images, train_split.targets)
        val_rmse = full_pass_rmse(model, val_split.images, val_split.targets)
        history.append(epoch, train_rmse, val_rmse)

        if val_loss_fn is not None:
            metric = float(val_loss_fn(model, val_x, val_y, epoch))
        else:
            metric = val_rmse
        if metric < best_metric:
            best_metric = metric
            best_epoch = epoch
            best_params = [p.data.copy() for p in model.parameters()]
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= config.patience:
                break

    for p, saved in zip(model.parameters(), best_params):
        p.data[:] = saved
    # the destination folder is not a training parameter; keeping it out of
    # the echo makes checkpoints byte-identical across output locations
    config_echo = {k: v for k, v in asdict(config).items() if k != "out_dir"}
    checkpoint = snapshot_checkpoint(
        model, keypoint=keypoint_name, arch=arch, geometry=geometry,
        feature_mean=mean, seed=config.seed, config=config_echo,
        best_epoch=best_epoch, best_val_rmse=best_metric,
    )
    return checkpoint, history


@dataclass
class TrainAllResult:
    keypoints: list[str]
    checkpoints: dict = field(default_factory=dict)   # name -> Checkpoint
    histories: dict = field(default_factory=dict)     # name -> LossHistory
    failures: dict = field(default_factory=dict)      # name -> error text

    def epochs_per_model(self) -> dict:
        return {k: len(h) for k, h in self.histories.items()}

    def total_epochs(self) -> int:
        return sum(self.epochs_per_model().values())

    def val_rmse_px(self) -> dict:
        return {k: PX_PER_UNIT * c.best_val_rmse for k, c in self.checkpoints.items()}

    def train_rmse_px_at_best(self) -> dict:
        out = {}
        for k, c in self.checkpoints.items():
            h = self.histories[k]
            out[k] = h.train_rmse_px[c.best_epoch - 1]
        return out


def train_all(dataset: FkpDataset, schema: KeypointSchema, base_config: TrainConfig,
              *, build_fn=None, val_loss_fn=None) -> TrainAllResult:
    """One model per keypoint, seeds base+index; a failed keypoint is recorded
    and the rest keep training."""
    from dataclasses import replace
    result = TrainAllResult(keypoints=list(schema.names))
    for index, name in enumerate(schema.names):
        config = replace(base_config, keypoint_index=index,
                         seed=base_config.seed + index)
        try:
            checkpoint, history = train_model(dataset, schema, config,
                                              build_fn=build_fn,
                                              val_loss_fn=val_loss_fn)
        except Exception as exc:          # keep the remaining models running
            result.failures[name] = f"{type(exc).__name__}: {exc}"
            continue
        result.checkpoints[name] = checkpoint
        result.histories[name] = history
    return result
