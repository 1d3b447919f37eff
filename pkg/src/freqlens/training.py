"""Standard and PGD adversarial training with SGD + momentum."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, pgd10_train_config, pgd_steps
from .models import ModelParams, as_tensors, forward_logits, loss_ce
from .tensor import GradTape, Tensor

MODES = ("standard", "adversarial")


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    mode: str = "standard"
    inner_attack: AttackConfig | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0; batch_size and learning_rate > 0")
        if self.mode == "adversarial":
            if self.inner_attack is None:
                self.inner_attack = pgd10_train_config(self.seed)
            if self.inner_attack.kind != "pgd":
                raise ValueError("adversarial training needs a pgd inner attack")


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    clean_acc: float
    robust_acc: float | None = None


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[EpochMetrics] = field(default_factory=list)


def train(params: ModelParams, dataset, cfg: TrainConfig) -> TrainResult:
    """Fit ``params`` on ``dataset``; the input params are not modified.

    Adversarial mode replaces each batch by PGD examples crafted against the
    current weights before the update (the min-max objective). Epoch shuffles
    come from ``(seed, epoch)``.
    """
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("train: empty dataset")
    if tuple(images.shape[1:]) != tuple(params.input_shape):
        raise ValueError(f"dataset images {images.shape[1:]} vs model input {params.input_shape}")
    current = params.copy()
    velocity = {k: np.zeros_like(v) for k, v in current.weights.items()}
    names = sorted(current.weights)
    history = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(labels))
        loss_sum = correct = robust = seen = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            x, y = images[idx], labels[idx]
            if cfg.mode == "adversarial":
                clean_pred = forward_logits(current, x).data.argmax(axis=1)
                x = pgd_steps(current, x, y, cfg.inner_attack, (cfg.inner_attack.seed, epoch, b))
            w = as_tensors(current)
            with GradTape() as tape:
                logits = forward_logits(current, x, w)
                loss = loss_ce(logits, y)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"loss became non-finite at epoch {epoch}, batch {b}")
            grads = tape.gradient(loss, [w[k] for k in names])
            for k, g in zip(names, grads):
                velocity[k] = cfg.momentum * velocity[k] + g
                current.weights[k] = current.weights[k] - cfg.learning_rate * velocity[k]
            pred = logits.data.argmax(axis=1)
            n = len(y)
            loss_sum += float(loss.data) * n
            seen += n
            if cfg.mode == "adversarial":
                correct += int((clean_pred == y).sum())
                robust += int((pred == y).sum())
            else:
                correct += int((pred == y).sum())
        history.append(EpochMetrics(
            epoch, loss_sum / seen, correct / seen,
            robust / seen if cfg.mode == "adversarial" else None,
        ))
    return TrainResult(current, history)


def write_metrics_csv(path, metrics: list[EpochMetrics]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "loss", "clean_acc", "robust_acc"])
        for m in metrics:
            wr.writerow([m.epoch, repr(m.loss), repr(m.clean_acc),
                         "" if m.robust_acc is None else repr(m.robust_acc)])
    return path
