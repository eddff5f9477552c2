"""Operator entry points: train, eval, predict, serve, synth, inspect.

Every command is deterministic given its flags and seed. Errors are printed
to stderr as a single JSON object; exit code 1 means the invocation was
invalid, 2 means the run itself failed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import models, service
from .dataset import (DEFAULT_VAL_FRACTION, generate_synthetic,
                      ingest_directory, split_train_val)
from .errors import ConfigError, SignForgeError
from .imaging import preprocess
from .trainer import TrainConfig, evaluate, train


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _env(name: str, default, cast=str):
    raw = os.environ.get("SIGNFORGE_" + name)
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"SIGNFORGE_{name} must be {cast.__name__}: {raw!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="signforge",
                     description="Sign-alphabet recognition engine and service")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a model on a class-directory dataset")
    tr.add_argument("--data", required=True, help="dataset root directory")
    tr.add_argument("--model", choices=("asl_cnn", "vgg16_transfer"),
                    default="asl_cnn")
    tr.add_argument("--epochs", type=int, default=20)
    tr.add_argument("--batch", type=int, default=128)
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out-weights", required=True)
    tr.add_argument("--val-split", type=float, default=DEFAULT_VAL_FRACTION,
                    help="fraction of items held out for validation")
    tr.add_argument("--metrics", default=None,
                    help="metrics JSON-lines path (default: <out-weights>.metrics.jsonl)")
    tr.add_argument("--backbone-weights", default=None,
                    help="backbone weight file for vgg16_transfer")
    tr.add_argument("--random-backbone", action="store_true",
                    help="explicitly allow a randomly initialized backbone")
    tr.add_argument("--freeze-backbone", action="store_true")

    ev = sub.add_parser("eval", help="evaluate a weight file on a dataset")
    ev.add_argument("--data", required=True)
    ev.add_argument("--weights", required=True)
    ev.add_argument("--model", choices=("asl_cnn", "vgg16_transfer"),
                    default="asl_cnn")

    pr = sub.add_parser("predict", help="classify a single PPM image")
    pr.add_argument("--image", required=True)
    pr.add_argument("--weights", required=True)
    pr.add_argument("--model", choices=("asl_cnn", "vgg16_transfer"),
                    default="asl_cnn")

    sv = sub.add_parser("serve", help="run the prediction service")
    sv.add_argument("--weights", default=_env("WEIGHTS", None))
    sv.add_argument("--model", choices=("asl_cnn", "vgg16_transfer"),
                    default=_env("MODEL", "asl_cnn"))
    sv.add_argument("--port", type=int, default=_env("PORT", service.DEFAULT_PORT, int))
    sv.add_argument("--host", default=_env("HOST", "127.0.0.1"))
    sv.add_argument("--max-body-mib", type=int,
                    default=_env("MAX_BODY_MIB", service.DEFAULT_MAX_BODY_MIB, int))

    sy = sub.add_parser("synth", help="generate the synthetic bar-pattern dataset")
    sy.add_argument("--out", required=True)
    sy.add_argument("--per-class", type=int, required=True)
    sy.add_argument("--seed", type=int, default=0)

    ins = sub.add_parser("inspect", help="print a weight-file manifest")
    ins.add_argument("--weights", required=True)
    return parser


def _build_model(kind: str, seed: int = 0, backbone=None, random_backbone=True,
                 freeze_backbone=False) -> models.Model:
    if kind == "asl_cnn":
        return models.build_asl_cnn(seed=seed)
    return models.build_vgg16_transfer(freeze_backbone=freeze_backbone,
                                       backbone_path=backbone,
                                       random_init=random_backbone, seed=seed)


def _cmd_train(args) -> int:
    dataset = ingest_directory(args.data)
    train_set, val_set = split_train_val(dataset, args.val_split, args.seed)
    model = _build_model(args.model, seed=args.seed, backbone=args.backbone_weights,
                         random_backbone=args.random_backbone,
                         freeze_backbone=args.freeze_backbone)
    cfg = TrainConfig(batch_size=args.batch, learning_rate=args.lr,
                      epochs=args.epochs, seed=args.seed,
                      freeze_backbone=args.freeze_backbone)
    metrics_path = args.metrics or (args.out_weights + ".metrics.jsonl")
    train(model, train_set, val_set, cfg, metrics_path=metrics_path)
    models.save_weights(model, args.out_weights)
    return 0


def _cmd_eval(args) -> int:
    dataset = ingest_directory(args.data)
    model = _build_model(args.model)
    models.load_weights(model, args.weights)
    loss, acc, confusion = evaluate(model, dataset)
    print(json.dumps({"loss": loss, "accuracy": acc,
                      "confusion": confusion.tolist()}))
    return 0


def _cmd_predict(args) -> int:
    with open(args.image, "rb") as fh:
        payload = fh.read()
    model = _build_model(args.model)
    models.load_weights(model, args.weights)
    started = time.perf_counter()
    tensor = preprocess(payload)
    label, index, probs = models.predict(model, tensor)
    print(json.dumps({
        "label": label,
        "index": index,
        "confidence": float(probs[index]),
        "probs": [float(p) for p in probs],
        "model_id": os.path.basename(args.weights),
        "latency_ms": (time.perf_counter() - started) * 1000.0,
    }))
    return 0


def _cmd_serve(args) -> int:
    if not args.weights:
        raise ConfigError("serve needs --weights (or SIGNFORGE_WEIGHTS)")
    svc = service.load_service(args.weights, args.model)
    server = service.make_server(svc, host=args.host, port=args.port,
                                 max_body_mib=args.max_body_mib, verbose=True)
    print(json.dumps({"listening": f"http://{args.host}:{server.server_address[1]}",
                      "model_id": svc.model_id}), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _cmd_synth(args) -> int:
    written = generate_synthetic(args.out, args.per_class, args.seed)
    print(json.dumps({"written": len(written), "classes": len(models.LABELS),
                      "per_class": args.per_class, "root": args.out}))
    return 0


def _cmd_inspect(args) -> int:
    tensors = models.read_weight_file(args.weights)
    manifest = [{"name": name, "shape": list(value.shape), "count": int(value.size)}
                for name, value in tensors.items()]
    print(json.dumps({"tensors": manifest,
                      "total_params": int(sum(v.size for v in tensors.values()))}))
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "serve": _cmd_serve,
    "synth": _cmd_synth,
    "inspect": _cmd_inspect,
}


def _fail(exc: Exception, code: int) -> int:
    print(json.dumps({"error": str(exc), "kind": type(exc).__name__}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        return _fail(exc, 1)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, _UsageError) as exc:
        return _fail(exc, 1)
    except (SignForgeError, OSError, ValueError, ArithmeticError, IndexError) as exc:
        return _fail(exc, 2)


if __name__ == "__main__":
    sys.exit(main())
