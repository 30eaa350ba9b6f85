"""Command-line driver: inspect, train, train-all, predict, submit, gradcheck.

Exit codes: 0 success, 2 bad usage or argument values, 3 unreadable or
malformed data, 4 self-check failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import layers
from .data import (
    DataError,
    default_schema,
    hflip_augment,
    nonmissing_counts,
    parse_id_lookup,
    parse_test_csv,
    parse_training_csv,
)
from .evaluate import PredictionSet, average_rmse, predict, write_submission
from .layers import (
    Conv2d,
    Dense,
    Elu,
    EXPECTED_LAYER_SHAPES,
    EXPECTED_PARAM_COUNT,
    MaxPool2d,
    Model,
    build_reduced_net,
)
from .optim import grad_check
from .tensor import Rng
from .train import (
    CheckpointError,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_all,
    train_model,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_SELFCHECK = 4

GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


def read_config_file(path) -> dict:
    """Plain `key = value` lines; '#' starts a comment; flags take precedence."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc.strerror}") from None
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{ln}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


_TRUTHY = {"1", "true", "yes", "on"}


def _merged(args, cfg: dict, key: str, default=None, cast=None):
    value = getattr(args, key, None)
    if value is None or value is False:       # False: unset store_true flag
        value = cfg.get(key, default if value is None else value)
    if value is None:
        return None
    if cast is bool:
        return value if isinstance(value, bool) else str(value).lower() in _TRUTHY
    return cast(value) if cast else value


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed,
                   inputs: list, outputs: list, started: float):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256_of(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "timings": {"wall_s": round(time.perf_counter() - started, 3)},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _resolve_keypoint(value: str, schema) -> int:
    text = str(value)
    if text.lstrip("-").isdigit():
        index = int(text)
        if not 0 <= index < len(schema.names):
            raise UsageError(f"keypoint index {index} outside 0..14")
        return index
    try:
        return schema.keypoint_index(text)
    except DataError:
        raise UsageError(f"unknown keypoint {text!r}; choices: "
                         f"{', '.join(schema.names)}") from None


def cmd_inspect(args) -> int:
    model = layers.build_keypoint_net(Rng(0))
    _, shapes = model.eval().forward_with_shapes(
        np.zeros((1, 1, 96, 96), dtype=np.float32))
    params_by_layer = {
        layer.name: sum(p.data.size for p in layer.parameters())
        for layer in model.layers
    }
    total = model.count_params()
    rows = [{"layer": name, "shape": list(shape),
             "params": params_by_layer.get(name, 0)}
            for name, shape in shapes]
    ok = tuple(shapes) == EXPECTED_LAYER_SHAPES and total == EXPECTED_PARAM_COUNT
    if args.json:
        print(json.dumps({"layers": rows, "total_params": total,
                          "matches_reference": ok}, indent=2))
    else:
        width = max(len(r["layer"]) for r in rows)
        for r in rows:
            shape = "x".join(str(s) for s in r["shape"])
            print(f"{r['layer']:<{width}}  {shape:<12}  {r['params']:>9,}")
        print(f"{'total':<{width}}  {'':<12}  {total:>9,}")
    if not ok:
        print("self-check failed: layer table deviates from the reference "
              "architecture", file=sys.stderr)
        return EXIT_SELFCHECK
    return EXIT_OK


def _train_common(args):
    cfg = read_config_file(args.config) if args.config else {}
    data = _merged(args, cfg, "data")
    if data is None:
        raise UsageError("--data is required (flag or config file)")
    out_dir = Path(_merged(args, cfg, "out", default="runs"))
    options = {
        "data": str(data),
        "seed": _merged(args, cfg, "seed", default=0, cast=int),
        "epochs": _merged(args, cfg, "epochs", default=300, cast=int),
        "batch": _merged(args, cfg, "batch", default=128, cast=int),
        "patience": _merged(args, cfg, "patience", default=30, cast=int),
        "limit_rows": _merged(args, cfg, "limit_rows", cast=int),
        "f64": _merged(args, cfg, "f64", default=False, cast=bool),
        "out": str(out_dir),
    }
    schema = default_schema()
    dataset = parse_training_csv(data, schema, limit_rows=options["limit_rows"])
    dataset = hflip_augment(dataset, schema)
    return options, schema, dataset, out_dir


def _make_config(options, keypoint_index, seed) -> TrainConfig:
    try:
        return TrainConfig(
            keypoint_index=keypoint_index, batch_size=options["batch"],
            max_epochs=options["epochs"], patience=options["patience"],
            seed=seed, dtype="float64" if options["f64"] else "float32",
            out_dir=options["out"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    started = time.perf_counter()
    options, schema, dataset, out_dir = _train_common(args)
    index = _resolve_keypoint(args.keypoint, schema)
    name = schema.names[index]
    config = _make_config(options, index, options["seed"])
    checkpoint, history = train_model(dataset, schema, config)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / f"{name}.ckpt"
    hist_path = out_dir / f"{name}_history.csv"
    save_checkpoint(checkpoint, ckpt_path)
    history.write_csv(hist_path)
    manifest = write_manifest(out_dir, "train", {**options, "keypoint": name},
                              options["seed"], [options["data"]],
                              [ckpt_path, hist_path], started)
    best_px = 48.0 * checkpoint.best_val_rmse
    print(f"{name}: {len(history)} epochs, best epoch {checkpoint.best_epoch}, "
          f"val RMSE {checkpoint.best_val_rmse:.6f} (norm) = {best_px:.4f} px")
    print(f"wrote {ckpt_path}, {hist_path}, {manifest}")
    return EXIT_OK


def cmd_train_all(args) -> int:
    started = time.perf_counter()
    options, schema, dataset, out_dir = _train_common(args)
    counts = nonmissing_counts(dataset)
    print("rows with both coordinates, per keypoint:")
    for name, count in zip(schema.names, counts):
        print(f"  {name:<28} {count}")
    base = _make_config(options, 0, options["seed"])
    result = train_all(dataset, schema, base)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, checkpoint in result.checkpoints.items():
        ckpt_path = out_dir / f"{name}.ckpt"
        hist_path = out_dir / f"{name}_history.csv"
        save_checkpoint(checkpoint, ckpt_path)
        result.histories[name].write_csv(hist_path)
        outputs += [ckpt_path, hist_path]

    print("\nepochs per model:")
    for name, epochs in result.epochs_per_model().items():
        print(f"  {name:<28} {epochs}")
    print(f"total epochs: {result.total_epochs()}")
    print("\nvalidation RMSE per model (px):")
    val_px = result.val_rmse_px()
    for name, value in val_px.items():
        print(f"  {name:<28} {value:.4f}")
    if val_px:
        train_px = result.train_rmse_px_at_best()
        avg_val = average_rmse(list(val_px.values()))
        avg_train = average_rmse(list(train_px.values()))
        print(f"average RMSE (px): {avg_val:.4f}")
        if avg_val > 0:
            print(f"train/validation RMSE ratio: {avg_train / avg_val:.4f}")
    for name, reason in result.failures.items():
        print(f"FAILED {name}: {reason}", file=sys.stderr)
    manifest = write_manifest(out_dir, "train-all", options, options["seed"],
                              [options["data"]], outputs, started)
    print(f"wrote {len(outputs)} files and {manifest}")
    return EXIT_DATA if result.failures else EXIT_OK


def cmd_predict(args) -> int:
    started = time.perf_counter()
    checkpoint = load_checkpoint(args.checkpoint)
    test = parse_test_csv(args.test)
    coords = predict(checkpoint, test)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    name = checkpoint.keypoint
    with open(out_path, "w") as fh:
        fh.write(f"ImageId,{name}_x,{name}_y\n")
        for image_id, (x, y) in zip(test.image_ids, coords):
            fh.write(f"{image_id},{x:.6f},{y:.6f}\n")
    write_manifest(out_path.parent, "predict", {"checkpoint": str(args.checkpoint),
                   "test": str(args.test), "out": str(out_path)},
                   checkpoint.seed, [args.checkpoint, args.test], [out_path], started)
    print(f"{name}: {len(test)} predictions -> {out_path}")
    return EXIT_OK


def cmd_submit(args) -> int:
    started = time.perf_counter()
    schema = default_schema()
    records = parse_id_lookup(args.lookup, schema)
    test = parse_test_csv(args.test)
    needed = sorted({feature[:-2] for _, _, feature in records})
    ckpt_dir = Path(args.checkpoints)
    predictions = PredictionSet(image_ids=test.image_ids)
    inputs = [args.lookup, args.test]
    for name in needed:
        path = ckpt_dir / f"{name}.ckpt"
        if not path.exists():
            raise DataError(f"no checkpoint for keypoint {name!r} "
                            f"(expected {path})")
        checkpoint = load_checkpoint(path)
        predictions.add(name, predict(checkpoint, test), str(path))
        inputs.append(path)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    count = write_submission(records, predictions, out_path, clip=args.clip)
    write_manifest(out_path.parent, "submit",
                   {"checkpoints": str(ckpt_dir), "test": str(args.test),
                    "lookup": str(args.lookup), "clip": bool(args.clip),
                    "out": str(out_path)},
                   None, inputs, [out_path], started)
    print(f"wrote {count} rows -> {out_path}")
    return EXIT_OK


def _gradcheck_cases(step: float):
    rng = np.random.default_rng(2024)

    def conv_case():
        model = Model([Conv2d("conv2d", 2, 3, 3, Rng(1), dtype=np.float64)],
                      input_shape=(2, 5, 5))
        x = rng.normal(size=(1, 2, 5, 5))
        target = rng.normal(size=(1, 3, 3, 3))
        return grad_check(model, x, target, step=step)

    def pool_case():
        model = Model([MaxPool2d("maxpool2d")], input_shape=(1, 4, 4))
        x = rng.normal(size=(1, 1, 4, 4))           # continuous: off-tie
        target = rng.normal(size=(1, 1, 2, 2))
        return grad_check(model, x, target, step=step)

    def elu_case():
        model = Model([Elu("elu")], input_shape=(6,))
        x = rng.normal(size=(4, 6))
        x[np.abs(x) < 1e-3] = 0.5                   # keep clear of the kink
        target = rng.normal(size=(4, 6))
        return grad_check(model, x, target, step=step)

    def dense_case():
        model = Model([Dense("dense", 5, 4, Rng(2), dtype=np.float64)],
                      input_shape=(5,))
        x = rng.normal(size=(3, 5))
        target = rng.normal(size=(3, 4))
        return grad_check(model, x, target, step=step)

    def model_case():
        net = build_reduced_net(Rng(3))
        net.eval()
        x = rng.uniform(size=(2, 1, 27, 27))
        target = rng.uniform(-1.0, 1.0, size=(2, 2))
        return grad_check(net, x, target, step=step)

    return {"conv2d": conv_case, "maxpool2d": pool_case, "elu": elu_case,
            "dense": dense_case, "model": model_case}


def cmd_gradcheck(args) -> int:
    cases = _gradcheck_cases(args.step)
    if args.layer != "all":
        cases = {args.layer: cases[args.layer]}
    failed = False
    for name, case in cases.items():
        error = case()
        status = "ok" if error < GRADCHECK_TOLERANCE else "FAIL"
        failed = failed or error >= GRADCHECK_TOLERANCE
        print(f"{name:<10} max relative error {error:.3e}  {status}")
    if failed:
        print(f"self-check failed: gradient error at or above "
              f"{GRADCHECK_TOLERANCE:g}", file=sys.stderr)
        return EXIT_SELFCHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fkpnet",
        description="facial keypoint models: inspect, train, predict, submit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="print the layer table and parameter count")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_inspect)

    def add_train_flags(p):
        p.add_argument("--data", help="training CSV path")
        p.add_argument("--config", help="key = value file; flags win")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int, help="max epochs (default 300)")
        p.add_argument("--batch", type=int, help="batch size (default 128)")
        p.add_argument("--patience", type=int, help="early-stop patience (default 30)")
        p.add_argument("--out", help="output directory (default runs)")
        p.add_argument("--limit-rows", dest="limit_rows", type=int,
                       help="parse at most this many data rows")
        p.add_argument("--f64", action="store_true",
                       help="train in float64 (gradient-check precision)")

    p = sub.add_parser("train", help="train one keypoint model")
    p.add_argument("--keypoint", required=True, help="keypoint name or index 0..14")
    add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("train-all", help="train all 15 keypoint models")
    add_train_flags(p)
    p.set_defaults(fn=cmd_train_all)

    p = sub.add_parser("predict", help="run one checkpoint over a test file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("submit", help="assemble a submission from checkpoints")
    p.add_argument("--checkpoints", required=True, help="directory of .ckpt files")
    p.add_argument("--test", required=True)
    p.add_argument("--lookup", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clip", action="store_true", help="clip coordinates to [0, 95]")
    p.set_defaults(fn=cmd_submit)

    p = sub.add_parser("gradcheck", help="finite-difference gradient self-check")
    p.add_argument("--layer", default="all",
                   choices=["all", "conv2d", "maxpool2d", "elu", "dense", "model"])
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
