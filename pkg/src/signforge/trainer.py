"""Cross-entropy loss, Adam, the epoch loop, and evaluation metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError
from .models import Model
from .rng import Rng
from .tensor import Scratch

PROB_FLOOR = 1e-12
ROW_SUM_TOL = 1e-4


@dataclass
class TrainConfig:
    """Training hyperparameters; the defaults are the reference configuration."""

    batch_size: int = 128
    learning_rate: float = 1e-4
    epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    freeze_backbone: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.learning_rate < 1.0:
            raise ConfigError(f"learning_rate must be in (0, 1), got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates and the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float

    def to_json(self) -> str:
        return json.dumps({"epoch": self.epoch,
                           "train_loss": self.train_loss,
                           "train_acc": self.train_acc,
                           "val_loss": self.val_loss,
                           "val_acc": self.val_acc})


def cross_entropy_loss(probs: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood plus the fused softmax gradient.

    ``probs`` must already be softmax output (rows summing to 1); the
    returned gradient is w.r.t. the pre-softmax logits: (probs - onehot) / m.
    """
    if probs.ndim != 2:
        raise ShapeError(f"probs must be [m, classes], got shape {probs.shape}")
    m, classes = probs.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (m,):
        raise ShapeError(f"targets length {targets.shape} does not match batch {m}")
    if targets.min() < 0 or targets.max() >= classes:
        raise IndexError(f"target out of range [0, {classes}): "
                         f"{int(targets[(targets < 0) | (targets >= classes)][0])}")
    row_sums = probs.sum(axis=1)
    worst = float(np.abs(row_sums - 1.0).max())
    if worst > ROW_SUM_TOL:
        raise ContractError(f"probability rows must sum to 1 within {ROW_SUM_TOL}, "
                            f"worst deviation {worst:.3g}")
    picked = probs[np.arange(m), targets]
    loss = float(-np.log(np.maximum(picked, PROB_FLOOR), dtype=np.float64).mean())
    d_logits = probs.copy()
    d_logits[np.arange(m), targets] -= 1.0
    d_logits /= m
    return loss, d_logits


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, p in params.items():
        if name not in grads:
            raise ShapeError(f"no gradient for parameter {name}")
        if grads[name].shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {grads[name].shape}, "
                             f"expected {p.shape}")
    state.t += 1
    bc1 = 1.0 / (1.0 - cfg.beta1 ** state.t)
    bc2 = 1.0 / (1.0 - cfg.beta2 ** state.t)
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p -= cfg.learning_rate * (m * bc1) / (np.sqrt(v * bc2) + cfg.epsilon)
    return params, state


def _check_dataset(model: Model, ds, role: str) -> None:
    if len(ds) == 0:
        raise ConfigError(f"{role} dataset is empty")
    if tuple(ds.images.shape[1:]) != model.input_shape:
        raise ShapeError(f"{role} images have shape {ds.images.shape[1:]}, "
                         f"expected {model.input_shape}")
    lo, hi = float(ds.images.min()), float(ds.images.max())
    if lo < 0.0 or hi > 1.0:
        raise ContractError(f"{role} images must be preprocessed to [0, 1], "
                            f"found range [{lo:.3g}, {hi:.3g}]")


def train(model: Model, train_set, val_set, cfg: TrainConfig,
          metrics_path=None, quiet: bool = False) -> list[EpochMetrics]:
    """Runs the full epoch loop; deterministic given (seed, data, config).

    Each epoch reshuffles the training set from the seeded stream, steps
    Adam over batches (the final short batch included), then evaluates both
    sets. One metrics JSON object per epoch goes to stdout and, when
    ``metrics_path`` is given, is appended there as JSON lines.
    """
    _check_dataset(model, train_set, "train")
    _check_dataset(model, val_set, "validation")
    frozen = set(model.frozen)
    if cfg.freeze_backbone:
        frozen |= model.backbone
    trainable = {k: p for k, p in model.params.items() if k not in frozen}
    if not trainable:
        raise ConfigError("every parameter is frozen; nothing to train")
    state = AdamState.for_params(trainable)
    rng = Rng(cfg.seed)
    n = len(train_set)
    history: list[EpochMetrics] = []
    step_scratch = Scratch()
    eval_scratch = Scratch()
    sink = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            perm = rng.permutation(n)
            for bi, start in enumerate(range(0, n, cfg.batch_size)):
                idx = perm[start:start + cfg.batch_size]
                x = train_set.images[idx]
                y = train_set.labels[idx]
                probs, caches = model.forward(x, want_caches=True,
                                              scratch=step_scratch)
                loss, d_logits = cross_entropy_loss(probs, y)
                if not math.isfinite(loss):
                    raise NumericError(f"non-finite loss in epoch {epoch}, batch {bi}")
                grads = model.backward(d_logits, caches, scratch=step_scratch)
                adam_step(trainable, {k: grads[k] for k in trainable}, state, cfg)
            train_loss, train_acc, _ = evaluate(model, train_set,
                                                scratch=eval_scratch)
            val_loss, val_acc, _ = evaluate(model, val_set, scratch=eval_scratch)
            metrics = EpochMetrics(epoch, train_loss, train_acc, val_loss, val_acc)
            history.append(metrics)
            line = metrics.to_json()
            if not quiet:
                print(line, flush=True)
            if sink is not None:
                sink.write(line + "\n")
                sink.flush()
    finally:
        if sink is not None:
            sink.close()
    return history


def evaluate(model: Model, dataset, batch_size: int = 256,
             scratch: Scratch | None = None):
    """(mean loss, accuracy, confusion matrix) of the model on a dataset.

    confusion[i][j] counts true class i predicted as j, so the rows sum to
    the per-class counts and the trace over the total is the accuracy.
    """
    n = len(dataset)
    if n == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    classes = model.num_classes
    confusion = np.zeros((classes, classes), dtype=np.int64)
    total_nll = 0.0
    correct = 0
    if scratch is None:
        scratch = Scratch()
    for start in range(0, n, batch_size):
        x = dataset.images[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        probs = model.forward(x, scratch=scratch)
        picked = probs[np.arange(len(y)), y]
        total_nll -= float(np.log(np.maximum(picked, PROB_FLOOR), dtype=np.float64).sum())
        pred = np.argmax(probs, axis=1)
        correct += int((pred == y).sum())
        np.add.at(confusion, (y, pred), 1)
    return total_nll / n, correct / n, confusion
