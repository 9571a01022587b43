"""Training loop, evaluation and throughput measurement."""
from __future__ import annotations

import csv
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, backward, no_grad, softmax_cross_entropy
from .autodiff.functional import softmax
from .candata import stack_windows
from .metrics import report_from_scores
from .model import build_model, forward, predict_logits


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 14
    seed: int = 0
    variant: str = "st"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.variant not in ("st", "dw"):
            raise ValueError(f"variant must be 'st' or 'dw', got {self.variant!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    params: object
    config: TrainConfig
    history: list = field(default_factory=list)

    @property
    def epoch_losses(self):
        return [h.train_loss for h in self.history]

    def history_dict(self):
        return {"config": self.config.to_dict(), "epochs": [asdict(h) for h in self.history]}


def write_history(history, path):
    with open(path, "w") as fh:
        json.dump(history, fh, indent=2, sort_keys=True)


def write_history_csv(history, path):
    rows = history["epochs"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(EpochRecord.__dataclass_fields__))
        w.writeheader()
        w.writerows(rows)


def _dropout_rng(seed):
    return np.random.Generator(np.random.Philox(seed + 1))


def _eval_loss_acc(params, images, seqs, labels):
    logits = predict_logits(params, images, seqs)
    loss = float(softmax_cross_entropy(Tensor(logits), labels).data)
    return loss, float(np.mean(np.argmax(logits, axis=1) == labels))


def train_step(params, opt, images, seqs, labels, rng):
    logits = forward(params, images, seqs, training=True, rng=rng)
    loss = softmax_cross_entropy(logits, labels)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} at optimizer step {opt.step + 1}")
    correct = int(np.sum(np.argmax(logits.data, axis=1) == labels))
    backward(loss)
    adam_step(opt, params.tensors)
    return value, correct


def train(split, config=None, params=None, log=None):
    """Adam on the averaged logits; returns the final-epoch parameters and per-epoch history."""
    config = config or TrainConfig()
    if not split.train or not split.validation:
        raise ValueError("training needs non-empty train and validation sets")
    params = params if params is not None else build_model(config.variant, config.seed)
    images, seqs, labels = stack_windows(split.train)
    v_images, v_seqs, v_labels = stack_windows(split.validation)
    order_rng = np.random.default_rng(config.seed)
    drop_rng = _dropout_rng(config.seed)
    opt = AdamState(lr=config.lr)
    result = TrainResult(params, config)
    n = len(labels)
    for epoch in range(1, config.epochs + 1):
        perm = order_rng.permutation(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss, hit = train_step(params, opt, images[idx], seqs[:, idx], labels[idx], drop_rng)
            total_loss += loss * len(idx)
            correct += hit
        val_loss, val_acc = _eval_loss_acc(params, v_images, v_seqs, v_labels)
        rec = EpochRecord(epoch, total_loss / n, correct / n, val_loss, val_acc)
        result.history.append(rec)
        if log is not None:
            log(f"epoch {epoch:>3}  train loss {rec.train_loss:.5f}  acc {rec.train_accuracy:.4f}  "
                f"val loss {rec.val_loss:.5f}  acc {rec.val_accuracy:.4f}")
    return result


def evaluate(params, windows, batch_size=256):
    """Eval-mode predictions on ``windows``; argmax of the final logits."""
    if not windows:
        raise ValueError("evaluate needs at least one window")
    images, seqs, labels = stack_windows(windows)
    probs = softmax(predict_logits(params, images, seqs, batch_size))
    return report_from_scores(labels, probs)


def measure_throughput(params, windows, mode="infer", warmup=2, repetitions=5, batch_size=32, timer=time.perf_counter):
    """Median batches per second ("items" are batches).

    Training mode times forward, backward and an optimizer step on a copy of
    the parameters, so ``params`` is left untouched. When fewer batches than
    ``warmup + repetitions`` exist they are reused in order.
    """
    if not windows:
        raise ValueError("throughput needs at least one window")
    if mode not in ("infer", "train"):
        raise ValueError(f"mode must be 'infer' or 'train', got {mode!r}")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    images, seqs, labels = stack_windows(windows)
    starts = list(range(0, len(labels), batch_size))
    work = params.clone() if mode == "train" else params
    opt = AdamState()
    rng = _dropout_rng(0)
    times = []
    for i in range(warmup + repetitions):
        s = starts[i % len(starts)]
        sl = slice(s, s + batch_size)
        t0 = timer()
        if mode == "train":
            train_step(work, opt, images[sl], seqs[:, sl], labels[sl], rng)
        else:
            with no_grad():
                forward(work, images[sl], seqs[:, sl])
        t1 = timer()
        if i >= warmup:
            times.append(t1 - t0)
    med = statistics.median(times)
    return float("inf") if med <= 0 else 1.0 / med
