"""Command-line entry point: ``ctsar {train,eval,predict,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric/validation failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint, gradcheck
from .config import ConfigError, RunConfig, load_config
from .data import DatasetError, decode_and_resize, load_dataset, load_images, stratified_split
from .layers import build_ctsar_cnn, model_from_state
from .tensor import NonFiniteError, Tensor, no_grad, softmax
from .training import TrainingError, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("ctsar")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# flag name -> RunConfig field
_OVERRIDES = {
    "data_root": "data_root",
    "out": "out_dir",
    "seed": "seed",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "learning_rate",
    "weight_decay": "weight_decay",
    "val_fraction": "val_fraction",
    "deterministic": "deterministic",
    "width_mult": "width_mult",
    "image_size": "image_size",
    "checkpoint": "checkpoint",
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value run configuration file")
    common.add_argument("--data-root")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--weight-decay", type=float)
    common.add_argument("--val-fraction", type=float)
    common.add_argument("--deterministic", action="store_true", default=None)
    common.add_argument("--width-mult", type=float)
    common.add_argument("--image-size", type=int)
    common.add_argument("--checkpoint")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="ctsar", description="CTSAR-CNN teat-end image classifier")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model and write checkpoints")
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    p = sub.add_parser("predict", parents=[common], help="classify one image")
    p.add_argument("image")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every layer")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = load_config(args.config) if args.config else {}
    for flag, key in _OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    try:
        return RunConfig(**values)
    except TrainingError as exc:
        raise ConfigError(str(exc)) from exc


@contextlib.contextmanager
def _thread_limit(deterministic: bool):
    if not deterministic:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def cmd_train(cfg: RunConfig) -> int:
    if not cfg.data_root:
        raise UsageError("train needs --data-root")
    out = Path(cfg.out_dir)
    manifest = stratified_split(load_dataset(cfg.data_root), cfg.val_fraction, cfg.seed)
    log.info("dataset %s: counts %s", cfg.data_root, manifest.counts)
    train_entries, val_entries = manifest.subset("train"), manifest.subset("val")
    x_train, y_train = load_images(train_entries, cfg.image_size)
    x_val, y_val = load_images(val_entries, cfg.image_size) if val_entries else (None, None)

    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(cfg.to_text())
    manifest.write_csv(out / "manifest.csv")
    model = build_ctsar_cnn(cfg.seed, cfg.width_mult)
    with _thread_limit(cfg.deterministic), (out / "metrics.csv").open("w") as stream:
        result = train(model, x_train, y_train, cfg.train_config(), x_val, y_val, metrics_stream=stream)
    checkpoint.save(out / "final.ckpt", model.state_dict())
    if result.best_state is not None:
        checkpoint.save(out / "best.ckpt", result.best_state)
    final = evaluate(model, x_train, y_train, result.weights)
    print(f"trained {result.steps} steps over {len(result.history)} epochs")
    print(f"final train accuracy: {final.accuracy:.6f}")
    if result.history:
        print(f"final val accuracy: {result.history[-1].val_acc:.6f}")
    print(f"checkpoint: {out / 'final.ckpt'}")
    return EXIT_OK


def _load_model(cfg: RunConfig):
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required")
    return model_from_state(checkpoint.load(cfg.checkpoint))


def cmd_eval(cfg: RunConfig, write_logits: bool = False) -> int:
    """Print metrics; with ``write_logits`` also dump per-sample logits to ``out_dir/logits.csv``."""
    if not cfg.data_root:
        raise UsageError("eval needs --data-root")
    model = _load_model(cfg)
    manifest = load_dataset(cfg.data_root)
    images, labels = load_images(manifest.entries, cfg.image_size)
    with _thread_limit(cfg.deterministic):
        metrics = evaluate(model, images, labels, batch_size=cfg.batch_size)
    print(metrics.format())
    if write_logits:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "logits.csv").open("w") as fh:
            fh.write("path,score,predicted,logit1,logit2,logit3,logit4\n")
            for e, row, pred in zip(manifest.entries, metrics.logits, metrics.predictions):
                fh.write(",".join([e.path, str(e.score), str(int(pred) + 1)] + [repr(float(v)) for v in row]) + "\n")
    return EXIT_OK


def cmd_predict(cfg: RunConfig, image: str) -> int:
    model = _load_model(cfg)
    x = decode_and_resize(image, cfg.image_size)[None]
    with no_grad(), _thread_limit(cfg.deterministic):
        logits = model(Tensor(x))
        probs = softmax(Tensor(logits.data.astype(np.float64)), axis=1).data[0]
    pred = int(np.argmax(logits.data[0]))
    print(f"score: {pred + 1}")
    print("probabilities: " + " ".join(f"{p:.8f}" for p in probs))
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    results = gradcheck.run_all(cfg.seed)
    failed = []
    for name, err in results.items():
        ok = err <= gradcheck.TOLERANCE
        print(f"{name:24s} max_rel_err={err:.3e} {'PASS' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cfg = resolve_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, write_logits=args.out is not None)
        if args.command == "predict":
            return cmd_predict(cfg, args.image)
        return cmd_gradcheck(cfg)
    except (UsageError, ConfigError) as exc:
        print(f"ctsar: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as exc:
        print(f"ctsar: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (checkpoint.CheckpointError, NonFiniteError, TrainingError, FloatingPointError) as exc:
        print(f"ctsar: validation error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
